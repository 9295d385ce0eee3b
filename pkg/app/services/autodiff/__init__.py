from app.services.autodiff.gradcheck import GradCheckReport, finite_diff_check
from app.services.autodiff.ops import (
    add,
    elementwise,
    gather_last,
    kl_rows,
    log_softmax_axis,
    matmul,
    mean_axis,
    mul,
    softmax_axis,
    sub,
)
from app.services.autodiff.tape import Tape, backward, gradient_for, named_gradients
from app.services.autodiff.tensor import Tensor, as_tensor

__all__ = [
    "GradCheckReport",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "elementwise",
    "finite_diff_check",
    "gather_last",
    "gradient_for",
    "kl_rows",
    "log_softmax_axis",
    "matmul",
    "mean_axis",
    "mul",
    "named_gradients",
    "softmax_axis",
    "sub",
]
