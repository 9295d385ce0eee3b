import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from app.core.errors import NonFiniteError
from app.services.autodiff.tape import Tape, backward, gradient_for
from app.services.autodiff.tensor import Tensor

logger = logging.getLogger(__name__)

ScalarFn = Callable[[Sequence[Tensor]], Tensor]


@dataclass
class ParameterCheck:
    index: int
    name: str
    max_abs_error: float
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    """Per-parameter comparison between analytic and central-difference gradients"""

    checks: List[ParameterCheck] = field(default_factory=list)
    tolerance: float = 1e-5

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)


def _evaluate(f: ScalarFn, arrays: Sequence[np.ndarray]) -> float:
    value = f([Tensor(a) for a in arrays])
    result = float(np.asarray(value.data).reshape(-1)[0])
    if not np.isfinite(result):
        raise NonFiniteError("Function evaluation during gradient check is not finite")
    return result


def numerical_gradient(
    f: ScalarFn, arrays: Sequence[np.ndarray], which: int, h: float
) -> np.ndarray:
    """Central differences for one parameter, element by element."""
    work = [np.array(a, dtype=np.float64) for a in arrays]
    target = work[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = _evaluate(f, work)
        flat[i] = original - h
        f_minus = _evaluate(f, work)
        flat[i] = original
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def finite_diff_check(
    f: ScalarFn,
    params: Sequence[np.ndarray],
    h: float = 1e-6,
    tol: float = 1e-5,
    atol: float = 1e-9,
    names: Optional[Sequence[str]] = None,
) -> GradCheckReport:
    """
    Compare tape gradients of ``f`` against central finite differences.

    The relative error of a parameter is its largest absolute deviation divided
    by the largest gradient magnitude of that parameter. A parameter passes when
    the relative error is within ``tol`` or the absolute error within ``atol``.

    Args:
        f: Deterministic scalar function of the parameter tensors
        params: Parameter values
        h: Central-difference step
        tol: Relative tolerance
        atol: Absolute tolerance for gradients that are (near) zero
        names: Optional labels for the report

    Raises:
        ValueError: If h is not positive
        NonFiniteError: If any evaluation of f is not finite
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    arrays = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in params]

    tape = Tape()
    watched = [tape.watch(a) for a in arrays]
    loss = f(watched)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("Function value at the check point is not finite")
    grads = backward(loss, tape)

    report = GradCheckReport(tolerance=tol)
    for i, tensor in enumerate(watched):
        analytic = gradient_for(grads, tensor)
        numeric = numerical_gradient(f, arrays, i, h)
        abs_err = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
        scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                    float(np.max(np.abs(numeric), initial=0.0)))
        rel_err = abs_err / scale if scale > 0 else abs_err
        name = names[i] if names else f"param_{i}"
        report.checks.append(
            ParameterCheck(
                index=i,
                name=name,
                max_abs_error=abs_err,
                max_rel_error=rel_err,
                passed=rel_err <= tol or abs_err <= atol,
            )
        )
    if not report.passed:
        failing = [c.name for c in report.checks if not c.passed]
        logger.warning(f"Gradient check failed for: {', '.join(failing)}")
    return report
