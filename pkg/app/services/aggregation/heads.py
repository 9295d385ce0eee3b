from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from app.core.errors import ShapeError
from app.services.aggregation.layers import LayerStack, pool_layers
from app.services.aggregation.parameters import ParameterStore, uniform_init
from app.services.autodiff import ops
from app.services.autodiff.tensor import Tensor

PREFIX = "heads"

ACTIVATIONS = {"relu": ops.relu, "tanh": ops.tanh}


@dataclass(frozen=True)
class HeadParams:
    """linear(d -> hidden) -> activation -> linear(hidden -> C), or linear(d -> C)"""

    w1: Tensor
    b1: Tensor
    w2: Optional[Tensor] = None
    b2: Optional[Tensor] = None

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]


@dataclass(frozen=True)
class ProbingHeadParams:
    """One independent head per layer"""

    heads: List[HeadParams]
    activation: str = "relu"

    @classmethod
    def from_bound(
        cls, bound: Dict[str, Tensor], n_heads: int, activation: str, prefix: str = PREFIX
    ) -> "ProbingHeadParams":
        return cls(
            heads=[head_params_from_bound(bound, f"{prefix}.{i}") for i in range(n_heads)],
            activation=activation,
        )


def head_params_from_bound(bound: Dict[str, Tensor], prefix: str) -> HeadParams:
    return HeadParams(
        w1=bound[f"{prefix}.w1"],
        b1=bound[f"{prefix}.b1"],
        w2=bound.get(f"{prefix}.w2"),
        b2=bound.get(f"{prefix}.b2"),
    )


def init_head_params(
    store: ParameterStore,
    prefix: str,
    dim: int,
    hidden: int,
    n_classes: int,
    rng: np.random.Generator,
    zero_final: bool = False,
) -> None:
    """Uniform +-1/sqrt(fan_in); ``zero_final`` zeroes the last linear layer."""
    if hidden == 0:
        w1 = np.zeros((dim, n_classes)) if zero_final else uniform_init(rng, dim, (dim, n_classes))
        b1 = np.zeros(n_classes) if zero_final else uniform_init(rng, dim, (n_classes,))
        store.add(f"{prefix}.w1", w1)
        store.add(f"{prefix}.b1", b1)
        return
    store.add(f"{prefix}.w1", uniform_init(rng, dim, (dim, hidden)))
    store.add(f"{prefix}.b1", uniform_init(rng, dim, (hidden,)))
    w2 = np.zeros((hidden, n_classes)) if zero_final else uniform_init(rng, hidden, (hidden, n_classes))
    b2 = np.zeros(n_classes) if zero_final else uniform_init(rng, hidden, (n_classes,))
    store.add(f"{prefix}.w2", w2)
    store.add(f"{prefix}.b2", b2)


def init_probing_heads(
    store: ParameterStore,
    n_layers: int,
    dim: int,
    hidden: int,
    n_classes: int,
    rng: np.random.Generator,
    zero_final: bool = False,
    prefix: str = PREFIX,
) -> None:
    for i in range(n_layers):
        init_head_params(store, f"{prefix}.{i}", dim, hidden, n_classes, rng, zero_final)


def head_forward(features: Tensor, head: HeadParams, activation: str = "relu") -> Tensor:
    """Class logits for (b, d) features."""
    if features.shape[-1] != head.in_dim:
        raise ShapeError("head input dim mismatch", [features.shape, head.w1.shape])
    z = ops.add(ops.matmul(features, head.w1), head.b1)
    if head.w2 is None:
        return z
    z = ACTIVATIONS[activation](z)
    return ops.add(ops.matmul(z, head.w2), head.b2)


def heads_forward(stack: LayerStack, params: ProbingHeadParams) -> Tensor:
    """
    Per-layer class logits, shape (b, n, C).

    Head i sees only layer i, mean-pooled over the sequence. Logits are
    un-normalized; apply log_softmax over the class axis for log-probabilities.
    """
    if len(params.heads) != stack.n_layers:
        raise ShapeError(
            f"{len(params.heads)} probing heads for {stack.n_layers} layers"
        )
    pooled = pool_layers(stack)
    logits = [
        head_forward(ops.take(pooled, i, axis=1), head, params.activation)
        for i, head in enumerate(params.heads)
    ]
    return ops.stack(logits, axis=1)
