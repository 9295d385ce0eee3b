"""Exception hierarchy shared by every VARAN service.

Input problems subclass ``ValueError`` and map to CLI exit code 1.
Failures while computing subclass ``RuntimeError`` and map to exit code 2.
"""

from typing import Optional, Sequence


class VaranError(Exception):
    """Base class for all VARAN errors"""


class VaranValidationError(VaranError, ValueError):
    """Raised when caller-supplied input is invalid"""


class VaranRuntimeError(VaranError, RuntimeError):
    """Raised when a computation fails on otherwise valid input"""


# ---------------------------------------------------------------------------
# Validation errors
# ---------------------------------------------------------------------------
class ConfigError(VaranValidationError):
    """Run configuration cannot be parsed or violates a documented range"""


class ShapeError(VaranValidationError):
    """Tensor shapes do not conform for the requested operation"""

    def __init__(
        self,
        message: str,
        shapes: Optional[Sequence[Sequence[int]]] = None,
    ):
        if shapes:
            rendered = ", ".join(str(tuple(s)) for s in shapes)
            message = f"{message} (shapes: {rendered})"
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes] if shapes else []


class AxisError(VaranValidationError):
    """Axis index outside the tensor rank"""


class DistributionError(VaranValidationError):
    """Invalid distribution parameters (degrees of freedom, layer count, ...)"""


class SupportError(DistributionError):
    """KL(q||p) is infinite: q puts mass where p has none"""


class NormalizationError(VaranValidationError):
    """A probability row does not sum to one"""


class LabelError(VaranValidationError):
    """Class label outside [0, C)"""


class RankError(VaranValidationError):
    """LoRA rank outside [1, min(d, k)]"""


class KindMismatchError(VaranValidationError):
    """Checkpoint model kind differs from the requested kind"""


class EmptyBatchError(VaranValidationError):
    """Metric requested on an empty batch"""


# ---------------------------------------------------------------------------
# Runtime errors
# ---------------------------------------------------------------------------
class TapeError(VaranRuntimeError):
    """Backward pass requested on a tensor the tape cannot differentiate"""


class NonFiniteError(VaranRuntimeError):
    """A function evaluation produced NaN or Inf"""


class NonFiniteGradientError(NonFiniteError):
    """Optimizer received a non-finite gradient"""

    def __init__(self, parameter: str):
        super().__init__(f"Non-finite gradient for parameter '{parameter}'")
        self.parameter = parameter


class DivergenceError(VaranRuntimeError):
    """Training loss became non-finite"""


class FrozenParameterError(VaranRuntimeError):
    """A frozen parameter changed during training"""

    def __init__(self, names: Sequence[str]):
        super().__init__(f"Frozen parameters changed during training: {', '.join(names)}")
        self.names = list(names)


class CorruptFileError(VaranRuntimeError):
    """Container file is truncated or its manifest disagrees with its payload"""


class VersionMismatchError(VaranRuntimeError):
    """Container file was written with an unsupported format version"""


class GradCheckFailure(VaranRuntimeError):
    """Analytic and numeric gradients disagree for at least one case"""

    def __init__(self, cases: Sequence[str]):
        super().__init__(f"Gradient check failed for: {', '.join(cases)}")
        self.cases = list(cases)
