"""
Differentiable primitives.

Every op computes its forward value with numpy and, when any input is attached
to a tape, registers a node whose vector-Jacobian product maps the output
gradient back to each input. Broadcasting is limited to scalar-with-tensor and
leading-batch extents (the smaller shape must be a suffix of the larger one).
"""

from typing import Any, Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import xlogy

from app.core.errors import AxisError, LabelError, ShapeError, SupportError
from app.services.autodiff.tensor import Tensor, as_tensor


def _emit(
    op: str,
    inputs: Sequence[Tensor],
    output: np.ndarray,
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    tape = next((t.tape for t in inputs if t.attached), None)
    if tape is None:
        return Tensor(output)
    return tape.record(op, inputs, output, vjp)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _is_suffix(short: Tuple[int, ...], long: Tuple[int, ...]) -> bool:
    return len(short) <= len(long) and tuple(long[len(long) - len(short) :]) == short


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> Tuple[int, ...]:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if _is_suffix(a, b):
        return b
    if _is_suffix(b, a):
        return a
    raise ShapeError(f"Incompatible shapes for {op}", [a, b])


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape of the input that was broadcast."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------
def elementwise(a: Any, b: Any, kind: str) -> Tensor:
    """Pointwise add, sub or mul with scalar / leading-batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape, kind)
    x, y = a.data, b.data
    if kind == "add":
        out = x + y

        def vjp(g):
            return unbroadcast(g, x.shape), unbroadcast(g, y.shape)

    elif kind == "sub":
        out = x - y

        def vjp(g):
            return unbroadcast(g, x.shape), unbroadcast(-g, y.shape)

    elif kind == "mul":
        out = x * y

        def vjp(g):
            return unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)

    else:
        raise ValueError(f"Unknown elementwise kind: {kind}")
    return _emit(kind, (a, b), out, vjp)


def add(a: Any, b: Any) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Any, b: Any) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Any, b: Any) -> Tensor:
    return elementwise(a, b, "mul")


def neg(a: Any) -> Tensor:
    return mul(a, -1.0)


def exp(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Any) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def tanh(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a: Any) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _emit("relu", (a,), a.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------
def matmul(a: Any, b: Any) -> Tensor:
    """Batched matrix product; leading extents follow the limited broadcast rule."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs rank >= 2 operands", [a.shape, b.shape])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul inner extents differ", [a.shape, b.shape])
    try:
        broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    except ShapeError:
        raise ShapeError("matmul batch extents differ", [a.shape, b.shape]) from None
    x, y = a.data, b.data
    out = np.matmul(x, y)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2))
        gb = np.matmul(np.swapaxes(x, -1, -2), g)
        return unbroadcast(ga, x.shape), unbroadcast(gb, y.shape)

    return _emit("matmul", (a, b), out, vjp)


def transpose(a: Any, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(_normalize_axis(ax, a.ndim) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise AxisError(f"transpose axes {axes} are not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _emit(
        "transpose",
        (a,),
        np.transpose(a.data, axes),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Any, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"Cannot reshape to {tuple(shape)}", [original]) from e
    return _emit("reshape", (a,), out, lambda g: (g.reshape(original),))


# ---------------------------------------------------------------------------
# Reductions and normalizations
# ---------------------------------------------------------------------------
def sum_all(a: Any) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit(
        "sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape),)
    )


def sum_axis(a: Any, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.ndim)
    shape = a.shape
    return _emit(
        "sum_axis",
        (a,),
        a.data.sum(axis=axis),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),),
    )


def mean_axis(x: Any, axis: int) -> Tensor:
    """Arithmetic mean along one axis; the output drops that axis."""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    count = x.shape[axis]
    if count < 1:
        raise ShapeError("mean over an empty axis", [x.shape])
    shape = x.shape
    return _emit(
        "mean_axis",
        (x,),
        x.data.mean(axis=axis),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape) / count,),
    )


def softmax_axis(x: Any, axis: int) -> Tensor:
    """Max-subtracted softmax; each slice along ``axis`` sums to one."""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), s, vjp)


def log_softmax_axis(x: Any, axis: int) -> Tensor:
    """Max-subtracted log-softmax; every entry is <= 0."""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_norm
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, vjp)


# ---------------------------------------------------------------------------
# Indexing and assembly
# ---------------------------------------------------------------------------
def take(x: Any, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``; the output drops that axis."""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise ShapeError(f"index {index} out of range on axis {axis}", [x.shape])
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        slicer = [slice(None)] * len(shape)
        slicer[axis] = index
        full[tuple(slicer)] = g
        return (full,)

    return _emit("take", (x,), np.take(x.data, index, axis=axis), vjp)


def narrow(x: Any, start: int, length: int, axis: int) -> Tensor:
    """Contiguous slice ``[start, start + length)`` along ``axis``."""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ShapeError(
            f"slice [{start}, {start + length}) out of range on axis {axis}", [x.shape]
        )
    shape = x.shape
    slicer = [slice(None)] * len(shape)
    slicer[axis] = slice(start, start + length)
    slicer = tuple(slicer)

    def vjp(g):
        full = np.zeros(shape)
        full[slicer] = g
        return (full,)

    return _emit("narrow", (x,), x.data[slicer], vjp)


def stack(tensors: Sequence[Any], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack needs equal shapes", [t.shape for t in tensors])
    axis = _normalize_axis(axis, tensors[0].ndim + 1)
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit("stack", tensors, out, vjp)


def gather_last(x: Any, labels: Sequence[int]) -> Tensor:
    """
    Pick one class per sample from the last axis.

    ``x`` has shape (b, ..., C) and ``labels`` has length b; the output has
    shape (b, ...).
    """
    x = as_tensor(x)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != x.shape[0]:
        raise ShapeError("labels must be one per sample", [x.shape, labels.shape])
    n_classes = x.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    index = labels.reshape((-1,) + (1,) * (x.ndim - 1))
    index = np.broadcast_to(index, x.shape[:-1] + (1,))
    shape = x.shape
    out = np.take_along_axis(x.data, index, axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros(shape)
        np.put_along_axis(full, index, g[..., None], axis=-1)
        return (full,)

    return _emit("gather_last", (x,), out, vjp)


# ---------------------------------------------------------------------------
# Divergences
# ---------------------------------------------------------------------------
def kl_rows(q: Any, p: np.ndarray) -> Tensor:
    """
    Row-wise KL(q || p) against a fixed reference distribution.

    ``q`` has shape (b, n) and ``p`` shape (n,). Zero entries of q contribute
    zero; q > 0 where p == 0 raises SupportError.
    """
    q = as_tensor(q)
    p = np.asarray(p, dtype=np.float64)
    if q.ndim != 2 or p.shape != (q.shape[1],):
        raise ShapeError("kl_rows needs q (b, n) and p (n,)", [q.shape, p.shape])
    w = q.data
    if np.any((w > 0) & (p[None, :] <= 0)):
        raise SupportError("KL is infinite: q has mass where the prior has none")
    log_p = np.log(np.where(p > 0, p, 1.0))
    out = (xlogy(w, w) - w * log_p[None, :]).sum(axis=1)

    def vjp(g):
        log_w = np.log(np.where(w > 0, w, 1.0))
        local = np.where(w > 0, log_w + 1.0 - log_p[None, :], 0.0)
        return (g[:, None] * local,)

    return _emit("kl_rows", (q,), out, vjp)
