from typing import Any

from app.core.errors import RankError, ShapeError
from app.services.autodiff import ops
from app.services.autodiff.tensor import Tensor, as_tensor


def lora_linear(
    x: Any,
    base: Any,
    adapter_a: Any,
    adapter_b: Any,
    scale: float = 1.0,
) -> Tensor:
    """
    x @ (W + scale * A @ B) with a frozen base W (d x k).

    The base is always treated as a constant, so it never appears in the
    gradient map; A (d x r) and B (r x k) receive gradients when attached.

    Raises:
        RankError: If r is outside [1, min(d, k)]
        ShapeError: If the factors do not conform to the base
    """
    base = as_tensor(base).detach()
    adapter_a, adapter_b = as_tensor(adapter_a), as_tensor(adapter_b)
    if base.ndim != 2 or adapter_a.ndim != 2 or adapter_b.ndim != 2:
        raise ShapeError("LoRA factors and base must be matrices", [base.shape, adapter_a.shape, adapter_b.shape])
    d, k = base.shape
    rank = adapter_a.shape[1]
    if not 1 <= rank <= min(d, k):
        raise RankError(f"LoRA rank {rank} outside [1, {min(d, k)}]")
    if adapter_a.shape != (d, rank) or adapter_b.shape != (rank, k):
        raise ShapeError("LoRA factors do not conform to the base", [base.shape, adapter_a.shape, adapter_b.shape])
    effective = ops.add(base, ops.mul(ops.matmul(adapter_a, adapter_b), scale))
    return ops.matmul(x, effective)
