"""Differentiable tensor operations.

Each function takes tensors (or array-likes, treated as constants) and
returns a new tensor wired into the graph when any input requires grad.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_node


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), _bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def _bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), _bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return make_node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# reductions ------------------------------------------------------------------

def _norm_axes(axis, ndim) -> Optional[tuple]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def _bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_node(a.data.sum(axis=axes, keepdims=keepdims), (a,), _bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the zero vector is 0."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (g * np.where(n > 0, a.data / safe, 0.0),)

    return make_node(n if keepdims else np.squeeze(n, axis=axis), (a,), _bw)


# shape ----------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def moveaxis(a, source: int, destination: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes.insert(destination % a.ndim, axes.pop(source % a.ndim))
    return transpose(a, tuple(axes))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_node(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, old),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)

    def _bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_node(a.data[idx], (a,), _bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def pad(a, pad_width: Sequence[tuple]) -> Tensor:
    """Zero padding; ``pad_width`` is one ``(before, after)`` pair per axis."""
    a = as_tensor(a)
    pad_width = [tuple(int(v) for v in p) for p in pad_width]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return make_node(np.pad(a.data, pad_width), (a,), lambda g: (g[sl],))


# contractions ---------------------------------------------------------------

def _parse_einsum(subscripts: str):
    lhs, out = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    return ins, out


def _contract2(sa: str, sb: str, out: str, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Two-operand einsum lowered to one batched matmul (or a broadcast
    product when nothing is summed)."""
    size = dict(zip(sa, A.shape))
    for i, n in zip(sb, B.shape):
        if size.setdefault(i, n) != n:
            raise ShapeError(f"einsum index {i!r} has extents {size[i]} and {n}")
    batch = [i for i in out if i in sa and i in sb]
    afree = [i for i in out if i in sa and i not in sb]
    bfree = [i for i in out if i in sb and i not in sa]
    contr = [i for i in sa if i in sb and i not in out]

    def prod(idx):
        return int(np.prod([size[i] for i in idx], dtype=np.int64))

    nb, na, nf, nc = prod(batch), prod(afree), prod(bfree), prod(contr)
    A2 = A.transpose([sa.index(i) for i in batch + afree + contr]).reshape(nb, na, nc)
    B2 = B.transpose([sb.index(i) for i in batch + contr + bfree]).reshape(nb, nc, nf)
    R = A2 * B2 if not contr else np.matmul(A2, B2)
    R = R.reshape([size[i] for i in batch + afree + bfree])
    order = batch + afree + bfree
    return np.ascontiguousarray(R.transpose([order.index(i) for i in out]))


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum over one or two operands.

    Every index of an operand must appear in the output or in the other
    operand, so each input gradient is itself an einsum.
    """
    operands = [as_tensor(o) for o in operands]
    ins, out = _parse_einsum(subscripts)
    if len(ins) != len(operands):
        raise ShapeError(f"einsum {subscripts!r} expects {len(ins)} operands")
    for term in ins + [out]:
        if len(set(term)) != len(term):
            raise ShapeError(f"einsum {subscripts!r}: repeated index within one term")

    if len(operands) == 1:
        data = np.einsum(subscripts, operands[0].data)
        (sa,) = ins
        if set(sa) - set(out):
            raise ShapeError("single-operand einsum may not reduce; use sum")
        a = operands[0]

        def _bw1(g):
            return (np.ascontiguousarray(np.einsum(f"{out}->{sa}", g)),)

        return make_node(data, (a,), _bw1)

    sa, sb = ins
    a, b = operands
    for mine, other in ((sa, sb), (sb, sa)):
        if set(mine) - set(out) - set(other):
            raise ShapeError(f"einsum {subscripts!r}: index summed within one operand")
    data = _contract2(sa, sb, out, a.data, b.data)

    def _bw2(g):
        ga = _contract2(out, sb, sa, g, b.data) if a.requires_grad else None
        gb = _contract2(out, sa, sb, g, a.data) if b.requires_grad else None
        return ga, gb

    return make_node(data, (a, b), _bw2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), _bw)


# normalized exponentials ---------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_axis(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; max-shifted so outputs are shift-invariant."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
    out = _softmax_np(a.data, axis)

    def _bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_node(out, (a,), _bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), _bw)
