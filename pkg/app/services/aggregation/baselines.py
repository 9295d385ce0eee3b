"""Static aggregation baselines: last layer and a learned weighted sum."""

from dataclasses import dataclass

import numpy as np

from app.core.errors import ShapeError
from app.services.aggregation.layers import LayerStack
from app.services.autodiff import ops
from app.services.autodiff.tensor import Tensor, as_tensor


@dataclass(frozen=True)
class StaticWeights:
    """n learnable logits shared by every input; softmax-normalized at use"""

    logits: Tensor

    @classmethod
    def uniform(cls, n_layers: int) -> "StaticWeights":
        return cls(Tensor(np.zeros(n_layers)))

    @classmethod
    def one_hot(cls, n_layers: int, index: int) -> "StaticWeights":
        logits = np.full(n_layers, -np.inf)
        logits[index] = 0.0
        return cls(Tensor(logits))

    def normalized(self) -> Tensor:
        return ops.softmax_axis(as_tensor(self.logits), axis=0)


def weighted_sum_aggregate(stack: LayerStack, weights: StaticWeights) -> Tensor:
    """Convex combination of layer states: (b, n, s, d) -> (b, s, d)."""
    if weights.logits.shape != (stack.n_layers,):
        raise ShapeError(
            "static weight count differs from layer count",
            [weights.logits.shape, stack.states.shape],
        )
    w = ops.reshape(weights.normalized(), (stack.n_layers, 1))
    moved = ops.transpose(stack.states, (0, 2, 3, 1))  # (b, s, d, n)
    combined = ops.matmul(moved, w)  # (b, s, d, 1)
    b, _, s, d = stack.states.shape
    return ops.reshape(combined, (b, s, d))


def last_layer_select(stack: LayerStack) -> Tensor:
    """States of the top layer, (b, s, d)."""
    return ops.take(stack.states, stack.n_layers - 1, axis=1)
