"""
Posterior predictor q(l | x).

Layer tokens (the sequence-pooled hidden states) are mixed by one standard
multi-head self-attention block (with a residual connection unless disabled),
projected to one logit per layer, and softmax-normalized over the layer axis.
Layer tokens carry no positional encoding unless ``layer_embeddings`` is
enabled, so the predictor is permutation-equivariant over layers by default.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from app.core.errors import ShapeError
from app.services.aggregation.parameters import ParameterStore, uniform_init
from app.services.autodiff import ops
from app.services.autodiff.tensor import Tensor

logger = logging.getLogger(__name__)

PREFIX = "posterior"


@dataclass(frozen=True)
class PosteriorPredictorParams:
    """
    Projection matrices of the attention block.

    The per-head query/key/value projections (d x d_head each) are packed
    column-wise into d x (h * d_head) matrices; head j owns columns
    [j * d_head, (j + 1) * d_head).

    Only the query projection carries a bias. Biases on keys, values or the
    output projections shift every layer logit equally and cancel in the softmax.
    """

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_out: Tensor
    heads: int
    layer_embedding: Optional[Tensor] = None
    residual: bool = True

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.heads

    @classmethod
    def from_bound(
        cls,
        bound: Dict[str, Tensor],
        heads: int,
        residual: bool = True,
        prefix: str = PREFIX,
    ) -> "PosteriorPredictorParams":
        embedding = bound.get(f"{prefix}.layer_embedding")
        names = ["w_q", "b_q", "w_k", "w_v", "w_o", "w_out"]
        params = cls(
            **{n: bound[f"{prefix}.{n}"] for n in names},
            heads=heads,
            layer_embedding=embedding,
            residual=residual,
        )
        if params.heads * params.head_dim != params.dim:
            raise ShapeError(
                f"heads * head_dim must equal dim ({params.heads} * {params.head_dim} != {params.dim})"
            )
        return params


def init_posterior_params(
    store: ParameterStore,
    dim: int,
    n_layers: int,
    heads: int,
    rng: np.random.Generator,
    output_init: float = 0.01,
    layer_embeddings: bool = False,
    prefix: str = PREFIX,
) -> None:
    """Register posterior parameters; uniform +-1/sqrt(fan_in) except the d->1 output."""
    if dim % heads != 0:
        raise ShapeError(f"dim {dim} is not divisible by {heads} heads")
    store.add(f"{prefix}.w_q", uniform_init(rng, dim, (dim, dim)))
    store.add(f"{prefix}.b_q", uniform_init(rng, dim, (dim,)))
    for name in ("k", "v", "o"):
        store.add(f"{prefix}.w_{name}", uniform_init(rng, dim, (dim, dim)))
    store.add(f"{prefix}.w_out", uniform_init(rng, dim, (dim, 1), scale=output_init))
    if layer_embeddings:
        store.add(f"{prefix}.layer_embedding", rng.normal(0.0, 0.02, size=(n_layers, dim)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ops.transpose(ops.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def posterior_logits(pooled: Tensor, params: PosteriorPredictorParams) -> Tensor:
    """Unnormalized per-layer scores, shape (b, n)."""
    if pooled.ndim != 3:
        raise ShapeError("pooled layer tokens must be (b, n, d)", [pooled.shape])
    b, n, d = pooled.shape
    if d != params.dim:
        raise ShapeError("pooled dim does not match the posterior predictor", [pooled.shape, params.w_q.shape])

    x = pooled
    if params.layer_embedding is not None:
        if params.layer_embedding.shape != (n, d):
            raise ShapeError("layer embedding does not match the stack", [params.layer_embedding.shape, pooled.shape])
        x = ops.add(x, params.layer_embedding)

    q = _split_heads(ops.add(ops.matmul(x, params.w_q), params.b_q), params.heads)
    k = _split_heads(ops.matmul(x, params.w_k), params.heads)
    v = _split_heads(ops.matmul(x, params.w_v), params.heads)

    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(params.head_dim))
    attention = ops.softmax_axis(scores, axis=-1)
    context = ops.matmul(attention, v)  # (b, h, n, d_head)
    mixed = ops.reshape(ops.transpose(context, (0, 2, 1, 3)), (b, n, d))

    out = ops.matmul(mixed, params.w_o)
    if params.residual:
        out = ops.add(out, x)
    projected = ops.matmul(out, params.w_out)  # (b, n, 1)
    return ops.reshape(projected, (b, n))


def posterior_forward(pooled: Tensor, params: PosteriorPredictorParams) -> Tensor:
    """Per-sample layer weights q(l | x), shape (b, n); every row sums to one."""
    return ops.softmax_axis(posterior_logits(pooled, params), axis=1)
