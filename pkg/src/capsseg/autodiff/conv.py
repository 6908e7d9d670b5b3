"""N-dimensional convolution, transposed convolution and window access ops.

All kernels iterate over kernel offsets in a fixed order and accumulate
strided slices, so results are bitwise reproducible and memory stays at
one output-sized buffer (no full im2col for 3D inputs).
"""

from __future__ import annotations

import itertools
from typing import Sequence, Union

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_node

IntOrSeq = Union[int, Sequence[int]]


def ntuple(v: IntOrSeq, rank: int) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * rank
    v = tuple(int(x) for x in v)
    if len(v) != rank:
        raise ShapeError(f"expected {rank} values, got {v}")
    return v


def conv_out_extent(n: int, k: int, stride: int = 1, pad: int = 0, dilation: int = 1) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def tconv_out_extent(n: int, k: int, stride: int = 1, pad: int = 0, dilation: int = 1) -> int:
    return (n - 1) * stride - 2 * pad + dilation * (k - 1) + 1


def same_padding(k: int, dilation: int = 1) -> int:
    """Symmetric padding that keeps extents for stride 1 (odd effective kernels)."""
    return dilation * (k - 1) // 2


def _offsets(kernel: tuple):
    return list(itertools.product(*(range(k) for k in kernel)))


def _window_slices(kk: tuple, dilation: tuple, stride: tuple, out: tuple) -> tuple:
    return tuple(slice(k * d, k * d + s * (o - 1) + 1, s) for k, d, s, o in zip(kk, dilation, stride, out))


def conv_nd(x, kernel, stride: IntOrSeq = 1, padding: IntOrSeq = 0, dilation: IntOrSeq = 1,
            rank: int = None) -> Tensor:
    """Cross-correlation of ``x[N, Cin, *spatial]`` with ``kernel[Cout, Cin, *k]``."""
    x, w = as_tensor(x), as_tensor(kernel)
    rank = x.ndim - 2 if rank is None else rank
    if x.ndim != rank + 2 or w.ndim != rank + 2:
        raise ShapeError(f"conv rank {rank}: input {x.shape}, kernel {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    stride, padding, dilation = (ntuple(v, rank) for v in (stride, padding, dilation))
    ksz = w.shape[2:]
    in_sp = x.shape[2:]
    out_sp = tuple(conv_out_extent(n, k, s, p, d) for n, k, s, p, d in zip(in_sp, ksz, stride, padding, dilation))
    if any(o < 1 for o in out_sp):
        raise ShapeError(f"kernel {ksz} (dilation {dilation}) larger than padded input {in_sp}")
    n, cout = x.shape[0], w.shape[0]
    pw = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x.data, pw) if any(padding) else x.data
    offsets = _offsets(ksz)
    lead = (slice(None), slice(None))

    acc = np.zeros((cout, n) + out_sp, dtype=DTYPE)
    for kk in offsets:
        xs = xp[lead + _window_slices(kk, dilation, stride, out_sp)]
        acc += np.tensordot(w.data[lead + kk], xs, axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(acc, 0, 1))

    def _bw(g):
        gt = np.moveaxis(g, 1, 0)
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=DTYPE)
        if w.requires_grad:
            gw = np.zeros(w.shape, dtype=DTYPE)
        sp_axes = list(range(2, 2 + rank))
        for kk in offsets:
            sl = lead + _window_slices(kk, dilation, stride, out_sp)
            if x.requires_grad:
                gxp[sl] += np.moveaxis(np.tensordot(w.data[lead + kk], gt, axes=([0], [0])), 0, 1)
            if w.requires_grad:
                gw[lead + kk] = np.tensordot(gt, xp[sl], axes=([1] + sp_axes, [0] + sp_axes))
        if x.requires_grad:
            crop = lead + tuple(slice(p, p + m) for p, m in zip(padding, in_sp))
            gx = gxp[crop]
        return gx, gw

    return make_node(out, (x, w), _bw)


def transposed_conv_nd(x, kernel, stride: IntOrSeq = 1, padding: IntOrSeq = 0, dilation: IntOrSeq = 1,
                       rank: int = None) -> Tensor:
    """Adjoint of :func:`conv_nd` with respect to its input.

    ``kernel`` has the conv layout ``[C_in_of_x, C_out, *k]``: the same
    tensor used by a conv mapping ``C_out -> C_in_of_x`` channels.
    ``padding`` crops the full output symmetrically.
    """
    x, w = as_tensor(x), as_tensor(kernel)
    rank = x.ndim - 2 if rank is None else rank
    if x.ndim != rank + 2 or w.ndim != rank + 2:
        raise ShapeError(f"transposed conv rank {rank}: input {x.shape}, kernel {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[0]}")
    stride, padding, dilation = (ntuple(v, rank) for v in (stride, padding, dilation))
    ksz = w.shape[2:]
    in_sp = x.shape[2:]
    full_sp = tuple(tconv_out_extent(n, k, s, 0, d) for n, k, s, d in zip(in_sp, ksz, stride, dilation))
    out_sp = tuple(f - 2 * p for f, p in zip(full_sp, padding))
    if any(o < 1 for o in out_sp):
        raise ShapeError(f"padding {padding} crops away the whole output {full_sp}")
    n, cout = x.shape[0], w.shape[1]
    offsets = _offsets(ksz)
    lead = (slice(None), slice(None))

    full = np.zeros((cout, n) + full_sp, dtype=DTYPE)
    for kk in offsets:
        sl = lead + _window_slices(kk, dilation, stride, in_sp)
        full[sl] += np.tensordot(w.data[lead + kk], x.data, axes=([0], [1]))
    crop = lead + tuple(slice(p, p + o) for p, o in zip(padding, out_sp))
    out = np.ascontiguousarray(np.moveaxis(full[crop], 0, 1))

    def _bw(g):
        pw = [(0, 0), (0, 0)] + [(p, p) for p in padding]
        gfull = np.pad(g, pw) if any(padding) else g
        gx = np.zeros(x.shape, dtype=DTYPE) if x.requires_grad else None
        gw = np.zeros(w.shape, dtype=DTYPE) if w.requires_grad else None
        sp_axes = list(range(2, 2 + rank))
        for kk in offsets:
            gs = gfull[lead + _window_slices(kk, dilation, stride, in_sp)]
            if gx is not None:
                gx += np.moveaxis(np.tensordot(w.data[lead + kk], gs, axes=([1], [1])), 0, 1)
            if gw is not None:
                gw[lead + kk] = np.tensordot(x.data, gs, axes=([0] + sp_axes, [0] + sp_axes))
        return gx, gw

    return make_node(out, (x, w), _bw)


def unfold(x, kernel: IntOrSeq, stride: IntOrSeq = 1, padding: IntOrSeq = 0, dilation: IntOrSeq = 1,
           rank: int = 2) -> Tensor:
    """Gather sliding windows of a channel-last grid.

    ``x[N, *spatial, *rest] -> [N, *out_spatial, K, *rest]`` with ``K`` the
    kernel volume, offsets in row-major order. Zero padding.
    """
    x = as_tensor(x)
    kernel, stride, padding, dilation = (ntuple(v, rank) for v in (kernel, stride, padding, dilation))
    in_sp = x.shape[1:1 + rank]
    rest = x.shape[1 + rank:]
    out_sp = tuple(conv_out_extent(n, k, s, p, d) for n, k, s, p, d in zip(in_sp, kernel, stride, padding, dilation))
    if any(o < 1 for o in out_sp):
        raise ShapeError(f"kernel {kernel} larger than padded input {in_sp}")
    pw = [(0, 0)] + [(p, p) for p in padding] + [(0, 0)] * len(rest)
    xp = np.pad(x.data, pw) if any(padding) else x.data
    offsets = _offsets(kernel)
    nrest = (slice(None),) * len(rest)

    out = np.empty((x.shape[0],) + out_sp + (len(offsets),) + rest, dtype=DTYPE)
    for i, kk in enumerate(offsets):
        out[(slice(None),) + (slice(None),) * rank + (i,)] = xp[(slice(None),) + _window_slices(kk, dilation, stride, out_sp) + nrest]

    def _bw(g):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i, kk in enumerate(offsets):
            gxp[(slice(None),) + _window_slices(kk, dilation, stride, out_sp) + nrest] += g[(slice(None),) + (slice(None),) * rank + (i,)]
        crop = (slice(None),) + tuple(slice(p, p + m) for p, m in zip(padding, in_sp)) + nrest
        return (gxp[crop],)

    return make_node(out, (x,), _bw)


def _compact_plan(in_sp, kernel, stride):
    """Per axis, the slice pairs ``(kk, out_slice, in_slice, slot)`` that
    place child ``i`` at output ``o = i * s + kk``, with the slot index
    ``q = kk // s`` so positions sharing a residue share a slot layout."""
    per_axis = []
    for n, k, s in zip(in_sp, kernel, stride):
        full = (n - 1) * s + k
        q_count = -(-k // s)
        entries = []
        for r in range(s):
            positions = len(range(r, full, s))
            for q in range(q_count):
                kk = r + s * q
                if kk >= k:
                    continue
                lo, hi = q, min(q + n, positions)
                if hi <= lo:
                    continue
                out_sl = slice(r + s * lo, r + s * (hi - 1) + 1, s)
                entries.append((kk, out_sl, slice(lo - q, hi - q), q))
        per_axis.append((entries, q_count))
    return per_axis


def compact_scatter_slots(x, kernel: IntOrSeq, stride: IntOrSeq = 1, padding: IntOrSeq = 0,
                          rank: int = 2) -> Tensor:
    """Like :func:`scatter_slots` but keeps only the ``ceil(k/s)^rank`` slots
    per output position that can ever be filled.

    ``x[N, *in, K, *rest] -> [N, *out, Q, *rest]``. Slot ``q`` of output
    ``o`` holds the vote from kernel offset ``o % s + s * q`` (per axis).
    Routing over these slots equals routing over the full slot layout,
    since the dropped slots only ever carry zero votes.
    """
    x = as_tensor(x)
    kernel, stride, padding = (ntuple(v, rank) for v in (kernel, stride, padding))
    in_sp = x.shape[1:1 + rank]
    rest = x.shape[2 + rank:]
    K = int(np.prod(kernel))
    if x.shape[1 + rank] != K:
        raise ShapeError(f"slot axis has {x.shape[1 + rank]} entries, kernel volume is {K}")
    plan = _compact_plan(in_sp, kernel, stride)
    q_counts = tuple(qc for _, qc in plan)
    Q = int(np.prod(q_counts))
    full_sp = tuple(tconv_out_extent(n, k, s) for n, k, s in zip(in_sp, kernel, stride))
    out_sp = tuple(f - 2 * p for f, p in zip(full_sp, padding))
    if any(o < 1 for o in out_sp):
        raise ShapeError(f"padding {padding} crops away the whole output {full_sp}")
    nrest = (slice(None),) * len(rest)
    moves = []
    for combo in itertools.product(*(entries for entries, _ in plan)):
        kk = np.ravel_multi_index(tuple(e[0] for e in combo), kernel)
        q = np.ravel_multi_index(tuple(e[3] for e in combo), q_counts)
        out_idx = (slice(None),) + tuple(e[1] for e in combo) + (int(q),) + nrest
        in_idx = (slice(None),) + tuple(e[2] for e in combo) + (int(kk),) + nrest
        moves.append((out_idx, in_idx))

    full = np.zeros((x.shape[0],) + full_sp + (Q,) + rest, dtype=DTYPE)
    for out_idx, in_idx in moves:
        full[out_idx] = x.data[in_idx]
    crop = (slice(None),) + tuple(slice(p, p + o) for p, o in zip(padding, out_sp))
    out = np.ascontiguousarray(full[crop])

    def _bw(g):
        pw = [(0, 0)] + [(p, p) for p in padding] + [(0, 0)] * (1 + len(rest))
        gfull = np.pad(g, pw) if any(padding) else g
        gx = np.zeros(x.shape, dtype=DTYPE)
        for out_idx, in_idx in moves:
            gx[in_idx] = gfull[out_idx]
        return (gx,)

    return make_node(out, (x,), _bw)


def scatter_slots(x, kernel: IntOrSeq, stride: IntOrSeq = 1, padding: IntOrSeq = 0, rank: int = 2) -> Tensor:
    """Transposed-convolution access pattern without summation.

    ``x[N, *in, K, *rest] -> [N, *out, K, *rest]`` where slot ``kk`` of
    output position ``o`` holds ``x[(o - kk) / stride, kk]`` when that
    input position exists and zeros otherwise. ``padding`` crops.
    """
    x = as_tensor(x)
    kernel, stride, padding = (ntuple(v, rank) for v in (kernel, stride, padding))
    in_sp = x.shape[1:1 + rank]
    rest = x.shape[2 + rank:]
    offsets = _offsets(kernel)
    if x.shape[1 + rank] != len(offsets):
        raise ShapeError(f"slot axis has {x.shape[1 + rank]} entries, kernel volume is {len(offsets)}")
    ones = (1,) * rank
    full_sp = tuple(tconv_out_extent(n, k, s) for n, k, s in zip(in_sp, kernel, stride))
    out_sp = tuple(f - 2 * p for f, p in zip(full_sp, padding))
    if any(o < 1 for o in out_sp):
        raise ShapeError(f"padding {padding} crops away the whole output {full_sp}")
    nrest = (slice(None),) * len(rest)
    all_sp = (slice(None),) * rank

    full = np.zeros((x.shape[0],) + full_sp + (len(offsets),) + rest, dtype=DTYPE)
    for i, kk in enumerate(offsets):
        full[(slice(None),) + _window_slices(kk, ones, stride, in_sp) + (i,) + nrest] = x.data[(slice(None),) + all_sp + (i,) + nrest]
    crop = (slice(None),) + tuple(slice(p, p + o) for p, o in zip(padding, out_sp))
    out = np.ascontiguousarray(full[crop])

    def _bw(g):
        pw = [(0, 0)] + [(p, p) for p in padding] + [(0, 0)] * (1 + len(rest))
        gfull = np.pad(g, pw) if any(padding) else g
        gx = np.empty(x.shape, dtype=DTYPE)
        for i, kk in enumerate(offsets):
            gx[(slice(None),) + all_sp + (i,) + nrest] = gfull[(slice(None),) + _window_slices(kk, ones, stride, in_sp) + (i,) + nrest]
        return (gx,)

    return make_node(out, (x,), _bw)
