"""
Toy encoder backbone.

A fixed random embedding followed by n residual blocks

    h_0 = raw @ E
    h_k = h_{k-1} + tanh(h_{k-1} @ W_k + b_k)

stands in for a pretrained speech encoder. The embedding E is always frozen.
In frozen mode the blocks are frozen too; fine-tuning mode trains W_k and b_k
directly; LoRA mode keeps them frozen and replaces each W_k by
W_k + scale * A_k @ B_k.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.errors import ConfigError, FrozenParameterError, ShapeError
from app.services.aggregation.layers import LayerStack
from app.services.aggregation.lora import lora_linear
from app.services.aggregation.parameters import ParameterStore, uniform_init
from app.services.autodiff import ops
from app.services.autodiff.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

PREFIX = "backbone"


@dataclass(frozen=True)
class BackboneBlock:
    w: Tensor
    b: Tensor
    lora_a: Optional[Tensor] = None
    lora_b: Optional[Tensor] = None
    trainable_base: bool = False

    @property
    def adapted(self) -> bool:
        return self.lora_a is not None and self.lora_b is not None


@dataclass(frozen=True)
class BackboneParams:
    embedding: Tensor
    blocks: List[BackboneBlock]
    lora_scale: float = 1.0

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @classmethod
    def from_bound(
        cls,
        bound,
        n_layers: int,
        lora_scale: float = 1.0,
        trainable_base: bool = False,
        prefix: str = PREFIX,
    ):
        blocks = [
            BackboneBlock(
                w=bound[f"{prefix}.{k}.w"],
                b=bound[f"{prefix}.{k}.b"],
                lora_a=bound.get(f"{prefix}.{k}.lora_a"),
                lora_b=bound.get(f"{prefix}.{k}.lora_b"),
                trainable_base=trainable_base,
            )
            for k in range(n_layers)
        ]
        return cls(embedding=bound[f"{prefix}.embedding"], blocks=blocks, lora_scale=lora_scale)


def init_backbone(
    store: ParameterStore,
    n_layers: int,
    dim: int,
    rng: np.random.Generator,
    raw_dim: Optional[int] = None,
    lora_rank: Optional[int] = None,
    trainable_base: bool = False,
    prefix: str = PREFIX,
) -> None:
    """
    Register base weights and, when ``lora_rank`` is set, trainable adapters.

    Block weights are frozen unless ``trainable_base`` is set; the embedding is
    always frozen. Adapters and a trainable base are mutually exclusive.

    Adapters follow the usual LoRA start: A = 0 and B uniform, so the adapted
    backbone equals the frozen one at initialization.
    """
    if trainable_base and lora_rank is not None:
        raise ConfigError("LoRA adapters require frozen block weights")
    raw_dim = raw_dim or dim
    store.add(f"{prefix}.embedding", uniform_init(rng, raw_dim, (raw_dim, dim)), frozen=True)
    for k in range(n_layers):
        store.add(f"{prefix}.{k}.w", uniform_init(rng, dim, (dim, dim)), frozen=not trainable_base)
        store.add(f"{prefix}.{k}.b", uniform_init(rng, dim, (dim,)), frozen=not trainable_base)
        if lora_rank is not None:
            store.add(f"{prefix}.{k}.lora_a", np.zeros((dim, lora_rank)))
            store.add(f"{prefix}.{k}.lora_b", uniform_init(rng, lora_rank, (lora_rank, dim)))


def apply_block(h: Tensor, block: BackboneBlock, lora_scale: float = 1.0) -> Tensor:
    """h + tanh(h @ W_eff + b) on (b, s, d) states."""
    if block.adapted:
        z = lora_linear(h, block.w, block.lora_a, block.lora_b, lora_scale)
    elif block.trainable_base:
        z = ops.matmul(h, block.w)
    else:
        z = ops.matmul(h, block.w.detach())
    bias = block.b if block.trainable_base else block.b.detach()
    return ops.add(h, ops.tanh(ops.add(z, bias)))


def toy_backbone_forward(raw: Tensor, params: BackboneParams) -> LayerStack:
    """
    Run the backbone on raw features.

    Args:
        raw: Input features, shape (b, s, d_in)
        params: Base weights with optional adapters

    Returns:
        Stack of (h_0, h_1, ..., h_n), shape (b, n + 1, s, d)
    """
    raw = as_tensor(raw)
    if raw.ndim != 3 or raw.shape[-1] != params.embedding.shape[0]:
        raise ShapeError("raw input must be (b, s, d_in)", [raw.shape, params.embedding.shape])
    h = ops.matmul(raw, params.embedding.detach())
    states = [h]
    for block in params.blocks:
        h = apply_block(h, block, params.lora_scale)
        states.append(h)
    return LayerStack(ops.stack(states, axis=1))


def refine_stack(stack: LayerStack, params: BackboneParams) -> LayerStack:
    """
    Apply block k to stored layer k + 1 of a precomputed (h_0, ..., h_n) stack.

    Used in LoRA and fine-tuning mode on benchmark stacks that were generated without a raw
    input; h_0 passes through unchanged.
    """
    if stack.n_layers != params.n_layers + 1:
        raise ShapeError(
            f"stored stack has {stack.n_layers} layers, backbone expects {params.n_layers + 1}",
            [stack.states.shape],
        )
    if stack.dim != params.dim:
        raise ShapeError("stack dim differs from the backbone", [stack.states.shape, params.embedding.shape])
    layers: List[Tensor] = [ops.take(stack.states, 0, axis=1)]
    for k, block in enumerate(params.blocks):
        layers.append(apply_block(ops.take(stack.states, k + 1, axis=1), block, params.lora_scale))
    return LayerStack(ops.stack(layers, axis=1))


def frozen_snapshot(store: ParameterStore, names: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    """Copies of frozen arrays (all of them by default), for before/after comparisons."""
    names = store.frozen_names if names is None else names
    return {name: np.array(store[name]) for name in names}


def check_frozen(store: ParameterStore, snapshot: Dict[str, np.ndarray]) -> None:
    """
    Compare frozen arrays against a snapshot, bit for bit.

    Raises:
        FrozenParameterError: If any snapshotted array changed
    """
    changed = [name for name, value in snapshot.items() if not np.array_equal(store[name], value)]
    if changed:
        raise FrozenParameterError(changed)
