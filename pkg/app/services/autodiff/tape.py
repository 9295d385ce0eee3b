import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import TapeError
from app.services.autodiff.tensor import Tensor

logger = logging.getLogger(__name__)

# Maps the output gradient to one gradient per op input (None when not needed)
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(frozen=True)
class TapeNode:
    index: int
    op: str
    parents: Tuple[Optional[int], ...]
    vjp: Optional[VJP]
    shape: Tuple[int, ...]
    name: Optional[str] = None


class Tape:
    """
    Append-only record of one forward pass.

    Nodes are appended in execution order, so every node's parents precede it.
    One tape per training step; a tape is not thread-safe.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value, name: Optional[str] = None) -> Tensor:
        """Register a leaf (a trainable parameter) and return it attached."""
        array = value.data if isinstance(value, Tensor) else value
        tensor = Tensor(array)
        node = TapeNode(
            index=len(self.nodes),
            op="leaf",
            parents=(),
            vjp=None,
            shape=tensor.shape,
            name=name,
        )
        self.nodes.append(node)
        tensor.node = node.index
        tensor.tape = self
        return tensor

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        output: np.ndarray,
        vjp: VJP,
    ) -> Tensor:
        """Append an op node if any input is attached; otherwise return a detached result."""
        parents = tuple(t.node if t.tape is self else None for t in inputs)
        for t in inputs:
            if t.attached and t.tape is not self:
                raise TapeError(f"Op '{op}' mixes tensors from different tapes")
        result = Tensor(output)
        if all(p is None for p in parents):
            return result
        node = TapeNode(
            index=len(self.nodes),
            op=op,
            parents=parents,
            vjp=vjp,
            shape=result.shape,
        )
        self.nodes.append(node)
        result.node = node.index
        result.tape = self
        return result

    def names(self) -> Dict[int, str]:
        return {n.index: n.name for n in self.nodes if n.op == "leaf" and n.name}


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Dict[int, Tensor]:
    """
    Reverse-mode sweep from a scalar loss.

    Args:
        loss: Scalar tensor attached to the tape
        tape: Tape to sweep; defaults to the loss's own tape

    Returns:
        Gradient map from node index to gradient tensor, for every node the
        loss depends on (including the loss itself, whose gradient is 1)

    Raises:
        TapeError: If the loss is not a scalar or is not attached to the tape
    """
    tape = tape or loss.tape
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.attached or tape is None or loss.tape is not tape:
        raise TapeError("backward needs a loss attached to the given tape")

    grads: Dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for node in reversed(tape.nodes[: loss.node + 1]):
        upstream = grads.get(node.index)
        if upstream is None or node.vjp is None:
            continue
        for parent, grad in zip(node.parents, node.vjp(upstream)):
            if parent is None or grad is None:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + grad
            else:
                grads[parent] = grad
    return {index: Tensor(g) for index, g in grads.items()}


def gradient_for(grads: Dict[int, Tensor], tensor: Tensor) -> np.ndarray:
    """Gradient of a watched tensor; zeros when the loss does not depend on it."""
    if tensor.node is not None and tensor.node in grads:
        return grads[tensor.node].numpy()
    return np.zeros(tensor.shape)


def named_gradients(grads: Dict[int, Tensor], tape: Tape) -> Dict[str, np.ndarray]:
    """Gradients of every named leaf on the tape, keyed by leaf name."""
    result = {}
    for index, name in tape.names().items():
        result[name] = grads[index].numpy() if index in grads else np.zeros(
            tape.nodes[index].shape
        )
    return result
