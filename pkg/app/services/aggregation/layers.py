from dataclasses import dataclass
from typing import Any

import numpy as np

from app.core.errors import ShapeError
from app.services.autodiff import ops
from app.services.autodiff.tensor import Tensor, as_tensor


@dataclass(frozen=True)
class LayerStack:
    """Hidden states H = (h_1, ..., h_n) with shape (batch, layers, sequence, dim)"""

    states: Tensor

    def __post_init__(self):
        states = as_tensor(self.states)
        if states.ndim != 4:
            raise ShapeError("LayerStack must be (batch, layers, sequence, dim)", [states.shape])
        if min(states.shape) < 1:
            raise ShapeError("LayerStack extents must be >= 1", [states.shape])
        if not np.all(np.isfinite(states.data)):
            raise ShapeError("LayerStack entries must be finite", [states.shape])
        object.__setattr__(self, "states", states)

    @classmethod
    def from_array(cls, data: Any) -> "LayerStack":
        return cls(Tensor(data))

    @property
    def batch(self) -> int:
        return self.states.shape[0]

    @property
    def n_layers(self) -> int:
        return self.states.shape[1]

    @property
    def seq_len(self) -> int:
        return self.states.shape[2]

    @property
    def dim(self) -> int:
        return self.states.shape[3]


def select_layers(stack: LayerStack, include_layer0: bool) -> LayerStack:
    """
    Drop the stored embedding layer h_0 unless it is requested.

    Stored stacks hold (h_0, h_1, ..., h_n) along the layer axis.
    """
    if include_layer0:
        return stack
    if stack.n_layers < 2:
        raise ShapeError("Stored stack has no encoder layers after h_0", [stack.states.shape])
    return LayerStack(ops.narrow(stack.states, 1, stack.n_layers - 1, axis=1))


def pool_layers(stack: LayerStack) -> Tensor:
    """Mean over the sequence axis per (batch, layer): (b, n, s, d) -> (b, n, d)."""
    return ops.mean_axis(stack.states, axis=2)
