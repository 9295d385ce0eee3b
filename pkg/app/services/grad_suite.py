"""
Finite-difference suite over every differentiable primitive and the full loss.

Each case draws its inputs from ``default_rng([seed, case_id])``, where case_id is
the case's fixed position in GRAD_CASES, so a subset run checks the same draws
as the full suite. Every case reduces the op output to a scalar through a fixed
random projection, so every output element contributes to the checked gradient.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.errors import ConfigError
from app.schemas.config import ModelSettings, RunConfig, SynthSpec
from app.services.aggregation.baselines import StaticWeights, weighted_sum_aggregate
from app.services.aggregation.heads import ProbingHeadParams, heads_forward
from app.services.aggregation.layers import LayerStack
from app.services.aggregation.lora import lora_linear
from app.services.aggregation.model_factory import ModelFactory
from app.services.aggregation.parameters import ParameterStore
from app.services.aggregation.posterior import PosteriorPredictorParams, posterior_forward
from app.services.autodiff import ops
from app.services.autodiff.gradcheck import GradCheckReport, finite_diff_check
from app.services.autodiff.tensor import Tensor
from app.services.distributions import Categorical
from app.services.objective import varan_loss
from app.services.synthdata.backbone import BackboneParams, init_backbone, toy_backbone_forward

logger = logging.getLogger(__name__)

# f, parameter arrays, parameter names
Case = Tuple[Callable[[Sequence[Tensor]], Tensor], List[np.ndarray], List[str]]


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _unary(op, sample) -> Callable[[np.random.Generator], Case]:
    def build(rng):
        x = sample(rng)
        projection = rng.standard_normal(op(Tensor(x)).shape)
        return (lambda p: ops.sum_all(ops.mul(op(p[0]), projection))), [x], ["x"]

    return build


def _binary(op, shape_a, shape_b) -> Callable[[np.random.Generator], Case]:
    def build(rng):
        a, b = rng.standard_normal(shape_a), rng.standard_normal(shape_b)
        projection = rng.standard_normal(op(Tensor(a), Tensor(b)).shape)
        return (lambda p: ops.sum_all(ops.mul(op(p[0], p[1]), projection))), [a, b], ["a", "b"]

    return build


def _chained(rng) -> Case:
    # two stages: tanh after matmul
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    projection = rng.standard_normal((3, 2))
    return (lambda p: ops.sum_all(ops.mul(ops.tanh(ops.matmul(p[0], p[1])), projection))), [a, b], ["a", "b"]


def _gather(rng) -> Case:
    x = rng.standard_normal((4, 3, 5))
    labels = rng.integers(0, 5, size=4)
    projection = rng.standard_normal((4, 3))
    return (lambda p: ops.sum_all(ops.mul(ops.gather_last(p[0], labels), projection))), [x], ["x"]


def _kl_rows(rng) -> Case:
    q = rng.uniform(0.05, 1.0, size=(3, 4))
    q /= q.sum(axis=1, keepdims=True)
    p = rng.uniform(0.05, 1.0, size=4)
    p /= p.sum()
    projection = rng.standard_normal(3)
    return (lambda t: ops.sum_all(ops.mul(ops.kl_rows(t[0], p), projection))), [q], ["q"]


def _stack(rng) -> Case:
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    projection = rng.standard_normal((2, 2, 3))
    return (lambda p: ops.sum_all(ops.mul(ops.stack([p[0], p[1]], axis=1), projection))), [a, b], ["a", "b"]


def _lora(rng) -> Case:
    x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    a, b = rng.standard_normal((4, 2)), rng.standard_normal((2, 5))
    projection = rng.standard_normal((3, 5))
    return (lambda p: ops.sum_all(ops.mul(lora_linear(p[0], w, p[1], p[2], 0.5), projection))), [x, a, b], ["x", "lora_a", "lora_b"]


def _tiny_config(head_hidden: int = 3) -> RunConfig:
    return RunConfig(
        seed=0,
        synth=SynthSpec(n_layers=3, dim=4, seq_len=2, n_classes=2, n_regimes=1),
        model=ModelSettings(head_hidden=head_hidden, head_activation="tanh", attention_heads=2),
    )


def _bound_case(rng, build_loss) -> Case:
    config = _tiny_config()
    store = ModelFactory.create(config).store
    names = list(store.trainable_names)
    arrays = [rng.standard_normal(store[n].shape) * 0.5 for n in names]
    stack = rng.standard_normal((2, 3, 2, 4))
    labels = rng.integers(0, 2, size=2)
    return (lambda p: build_loss(dict(zip(names, p)), stack, labels)), arrays, names


def _posterior_case(rng) -> Case:
    projection = rng.standard_normal((2, 3))

    def loss(bound, stack, labels):
        params = PosteriorPredictorParams.from_bound(bound, heads=2)
        weights = posterior_forward(ops.mean_axis(Tensor(stack), axis=2), params)
        return ops.sum_all(ops.mul(weights, projection))

    f, arrays, names = _bound_case(rng, loss)
    keep = [i for i, n in enumerate(names) if n.startswith("posterior.")]
    return _subset(f, arrays, names, keep)


def _heads_case(rng) -> Case:
    projection = rng.standard_normal((2, 3, 2))

    def loss(bound, stack, labels):
        heads = ProbingHeadParams.from_bound(bound, 3, "tanh")
        return ops.sum_all(ops.mul(heads_forward(LayerStack(Tensor(stack)), heads), projection))

    f, arrays, names = _bound_case(rng, loss)
    keep = [i for i, n in enumerate(names) if n.startswith("heads.")]
    return _subset(f, arrays, names, keep)


def _subset(f, arrays, names, keep) -> Case:
    """Check only ``keep`` parameters; the others stay at their drawn values."""
    fixed = list(arrays)

    def g(p):
        full = list(fixed)
        for slot, tensor in zip(keep, p):
            full[slot] = tensor
        return f(full)

    return g, [arrays[i] for i in keep], [names[i] for i in keep]


def _weighted_sum(rng) -> Case:
    stack = rng.standard_normal((2, 3, 2, 4))
    logits = rng.standard_normal(3)
    projection = rng.standard_normal((2, 2, 4))

    def f(p):
        combined = weighted_sum_aggregate(LayerStack(Tensor(stack)), StaticWeights(p[0]))
        return ops.sum_all(ops.mul(combined, projection))

    return f, [logits], ["static.logits"]


def _full_loss(rng) -> Case:
    """End-to-end VARAN loss (posterior + heads + KL) on n=3, d=4, C=2."""
    prior = Categorical(np.array([0.2, 0.3, 0.5]))
    heads = _tiny_config().model.attention_heads

    def loss(bound, stack, labels):
        layer_stack = LayerStack(Tensor(stack))
        weights = posterior_forward(
            ops.mean_axis(layer_stack.states, axis=2), PosteriorPredictorParams.from_bound(bound, heads)
        )
        per_layer = ops.log_softmax_axis(
            heads_forward(layer_stack, ProbingHeadParams.from_bound(bound, 3, "tanh")), axis=-1
        )
        return varan_loss(weights, per_layer, labels, prior, beta=0.3).total

    return _bound_case(rng, loss)


def _toy_backbone(lora: bool) -> Callable[[np.random.Generator], Case]:
    """Raw input through a 2-block backbone; checks the adapters, or the block weights when fine-tuning."""

    def build(rng) -> Case:
        store = ParameterStore()
        init_backbone(store, 2, 3, rng, raw_dim=4, lora_rank=2 if lora else None, trainable_base=not lora)
        names = list(store.trainable_names)
        arrays = [rng.standard_normal(store[n].shape) * 0.5 for n in names]
        raw = rng.standard_normal((2, 2, 4))
        projection = rng.standard_normal((2, 3, 2, 3))

        def f(p):
            bound = {**store.bind(), **dict(zip(names, p))}
            params = BackboneParams.from_bound(bound, 2, lora_scale=0.5, trainable_base=not lora)
            return ops.sum_all(ops.mul(toy_backbone_forward(Tensor(raw), params).states, projection))

        return f, arrays, names

    return build


GRAD_CASES: Dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _binary(ops.add, (3, 4), (3, 4)),
    "add_broadcast": _binary(ops.add, (2, 3, 4), (4,)),
    "sub": _binary(ops.sub, (3, 4), (3, 4)),
    "mul": _binary(ops.mul, (3, 4), (3, 4)),
    "mul_broadcast": _binary(ops.mul, (2, 3, 4), (3, 4)),
    "matmul": _binary(ops.matmul, (3, 4), (4, 2)),
    "matmul_batched": _binary(ops.matmul, (2, 3, 4), (4, 2)),
    "exp": _unary(ops.exp, lambda r: r.standard_normal((3, 4))),
    "log": _unary(ops.log, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "tanh": _unary(ops.tanh, lambda r: r.standard_normal((3, 4))),
    "relu": _unary(ops.relu, lambda r: _away_from_zero(r, (3, 4))),
    "softmax_axis": _unary(lambda x: ops.softmax_axis(x, axis=1), lambda r: r.standard_normal((3, 4))),
    "log_softmax_axis": _unary(lambda x: ops.log_softmax_axis(x, axis=0), lambda r: r.standard_normal((3, 4))),
    "mean_axis": _unary(lambda x: ops.mean_axis(x, axis=1), lambda r: r.standard_normal((2, 5, 4))),
    "sum_axis": _unary(lambda x: ops.sum_axis(x, axis=0), lambda r: r.standard_normal((3, 4))),
    "transpose": _unary(lambda x: ops.transpose(x, (2, 0, 1)), lambda r: r.standard_normal((2, 3, 4))),
    "reshape": _unary(lambda x: ops.reshape(x, (4, 3)), lambda r: r.standard_normal((3, 4))),
    "take": _unary(lambda x: ops.take(x, 1, axis=1), lambda r: r.standard_normal((2, 3, 4))),
    "narrow": _unary(lambda x: ops.narrow(x, 1, 2, axis=1), lambda r: r.standard_normal((2, 3, 4))),
    "stack": _stack,
    "gather_last": _gather,
    "kl_rows": _kl_rows,
    "chain": _chained,
    "lora_linear": _lora,
    "weighted_sum_aggregate": _weighted_sum,
    "posterior_forward": _posterior_case,
    "heads_forward": _heads_case,
    "varan_loss": _full_loss,
    "toy_backbone_lora": _toy_backbone(lora=True),
    "toy_backbone_finetune": _toy_backbone(lora=False),
}
# Stable per-case seed stream; new cases are appended to GRAD_CASES
CASE_IDS: Dict[str, int] = {name: i for i, name in enumerate(GRAD_CASES)}


@dataclass
class CaseResult:
    case: str
    seed: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


@dataclass
class GradSuiteReport:
    results: List[CaseResult] = field(default_factory=list)
    elapsed_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[CaseResult]:
        return [r for r in self.results if not r.passed]

    def worst_errors(self) -> Dict[str, float]:
        worst: Dict[str, float] = {}
        for r in self.results:
            worst[r.case] = max(worst.get(r.case, 0.0), r.report.max_rel_error)
        return worst


def run_grad_suite(
    seeds: Optional[int] = None,
    h: Optional[float] = None,
    tol: Optional[float] = None,
    cases: Optional[Sequence[str]] = None,
) -> GradSuiteReport:
    """
    Run every gradient case over ``seeds`` random draws.

    Args:
        seeds: Draws per case; defaults to ``settings.GRAD_CHECK_SEEDS``
        h: Central-difference step; defaults to ``settings.GRAD_CHECK_STEP``
        tol: Relative tolerance; defaults to ``settings.GRAD_CHECK_TOLERANCE``
        cases: Subset of case names; all cases when omitted
    """
    seeds = settings.GRAD_CHECK_SEEDS if seeds is None else seeds
    h = settings.GRAD_CHECK_STEP if h is None else h
    tol = settings.GRAD_CHECK_TOLERANCE if tol is None else tol
    names = list(cases) if cases is not None else list(GRAD_CASES)
    unknown = [n for n in names if n not in GRAD_CASES]
    if unknown:
        raise ConfigError(f"Unknown gradient cases: {', '.join(unknown)}")

    report = GradSuiteReport()
    started = time.perf_counter()
    for name in names:
        for seed in range(seeds):
            rng = np.random.default_rng([seed, CASE_IDS[name]])
            f, arrays, param_names = GRAD_CASES[name](rng)
            check = finite_diff_check(f, arrays, h=h, tol=tol, names=param_names)
            report.results.append(CaseResult(case=name, seed=seed, report=check))
    report.elapsed_seconds = time.perf_counter() - started
    logger.info(
        f"Gradient suite: {len(report.results)} checks, {len(report.failures)} failures, "
        f"{report.elapsed_seconds:.1f}s"
    )
    return report
