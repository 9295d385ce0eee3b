from typing import TYPE_CHECKING, Any, Optional, Tuple

import numpy as np

if TYPE_CHECKING:
    from app.services.autodiff.tape import Tape


class Tensor:
    """
    Float64 array with an optional attachment to a differentiation tape.

    Detached tensors are immutable values and can be shared freely. A tensor
    attached to a tape carries the index of the tape node that produced it.
    """

    __slots__ = ("data", "node", "tape")

    def __init__(
        self,
        data: Any,
        node: Optional[int] = None,
        tape: Optional["Tape"] = None,
    ):
        array = np.array(data, dtype=np.float64)
        array.flags.writeable = False
        self.data = array
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def attached(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        """Writable copy of the underlying values"""
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        suffix = f", node={self.node}" if self.attached else ""
        return f"Tensor(shape={self.shape}{suffix})"

    # Operator sugar; the primitives live in ops
    def __add__(self, other):
        from app.services.autodiff import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from app.services.autodiff import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from app.services.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from app.services.autodiff import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from app.services.autodiff import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from app.services.autodiff import ops

        return ops.mul(other, self)

    def __neg__(self):
        from app.services.autodiff import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from app.services.autodiff import ops

        return ops.matmul(self, other)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)
