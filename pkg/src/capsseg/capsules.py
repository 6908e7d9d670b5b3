"""Capsule primitives: squash, votes, routing by agreement, capsule layers.

Capsule grids are channel-last: ``[N, *spatial, C, A]`` with ``C`` capsule
types of dimension ``A``. Spatial rank is 2 or 3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .autodiff import functional as F
from .autodiff.conv import compact_scatter_slots, conv_out_extent, ntuple, scatter_slots, tconv_out_extent, unfold
from .autodiff.tensor import ContractError, ShapeError, Tensor, as_tensor, make_node

SQUASH_EPS = 1e-12


def squash(s, eps: float = SQUASH_EPS) -> Tensor:
    """Shrink vectors along the last axis to length |s|^2 / (1 + |s|^2).

    Written as ``s * |s| / (1 + |s|^2)`` with ``|s| = sqrt(|s|^2 + eps^2)``,
    which is finite (and 0) at the zero vector.
    """
    s = as_tensor(s)
    sq = (s.data * s.data).sum(axis=-1, keepdims=True)
    n = np.sqrt(sq + eps * eps)
    denom = 1.0 + sq
    scale = n / denom
    out = s.data * scale

    def _bw(g):
        dscale_dsq = 0.5 / (n * denom) - n / (denom * denom)
        gs = (g * s.data).sum(axis=-1, keepdims=True)
        return (g * scale + s.data * (2.0 * dscale_dsq * gs),)

    return make_node(out, (s,), _bw)


def capsule_lengths(grid) -> Tensor:
    """Euclidean length of every capsule: ``[..., C, A] -> [..., C]``."""
    return F.norm(grid, axis=-1)


def to_primary_capsules(features, capsule_dim: int, rank: Optional[int] = None) -> Tensor:
    """Reshape a feature map ``[N, C, *spatial]`` into ``[N, *spatial, C / D, D]``.

    Channel ``c`` becomes component ``c % D`` of capsule type ``c // D``.
    """
    features = as_tensor(features)
    rank = features.ndim - 2 if rank is None else rank
    n, c = features.shape[:2]
    if c % capsule_dim:
        raise ShapeError(f"{c} channels are not divisible into capsules of dimension {capsule_dim}")
    sp = features.shape[2:]
    x = F.reshape(features, (n, c // capsule_dim, capsule_dim) + sp)
    return F.transpose(x, (0,) + tuple(range(3, 3 + rank)) + (1, 2))


def capsules_to_channels(grid, rank: Optional[int] = None) -> Tensor:
    """Inverse of :func:`to_primary_capsules`: ``[N, *sp, C, A] -> [N, C*A, *sp]``."""
    grid = as_tensor(grid)
    rank = grid.ndim - 3 if rank is None else rank
    n = grid.shape[0]
    sp = grid.shape[1:1 + rank]
    c, a = grid.shape[1 + rank:]
    x = F.transpose(grid, (0, 1 + rank, 2 + rank) + tuple(range(1, 1 + rank)))
    return F.reshape(x, (n, c * a) + sp)


def compute_votes(children, M, B=None) -> Tensor:
    """Prediction vectors ``M[k, c] @ u[k, c] (+ B)`` for every child.

    ``children[..., K, Cin, Din]`` and ``M[K, Cin, Din, Cout, Dout]`` give
    ``votes[..., K, Cin, Cout, Dout]``.
    """
    children, M = as_tensor(children), as_tensor(M)
    K, cin, din = children.shape[-3:]
    if M.shape[:3] != (K, cin, din):
        raise ShapeError(f"children window {children.shape[-3:]} does not match transform {M.shape[:3]}")
    lead = children.shape[:-3]
    flat = F.reshape(children, (-1, K, cin, din))
    votes = F.einsum("pkcd,kcdje->pkcje", flat, M)
    votes = F.reshape(votes, lead + (K, cin) + M.shape[3:])
    if B is not None:
        votes = votes + B
    return votes


def dynamic_routing(votes, iterations: int = 3, priors=None, trace: Optional[List[np.ndarray]] = None,
                    final_update: bool = True):
    """Routing by agreement over ``votes[..., I, J, D]`` (children I, parents J).

    Each iteration: ``c = softmax(b)`` over parents, ``s_j = sum_i c_ij v_ij``,
    ``v_j = squash(s_j)``, ``b_ij += v_ij . v_j``. Returns
    ``(parents[..., J, D], coupling[..., I, J], priors[..., I, J])`` where the
    coupling is the one used in the final iteration. ``trace`` collects
    every iteration's coupling. ``final_update=False`` skips the last prior
    update, which does not affect the parents.
    """
    if iterations < 1:
        raise ContractError("routing needs at least one iteration")
    votes = as_tensor(votes)
    lead = votes.shape[:-3]
    I, J, D = votes.shape[-3:]
    u = F.reshape(votes, (-1, I, J, D))
    if priors is None:
        b = Tensor(np.zeros(u.shape[:3]))
    else:
        priors = as_tensor(priors)
        if priors.shape[-2:] != (I, J):
            raise ShapeError(f"priors {priors.shape} do not match votes {votes.shape}")
        b = F.reshape(F.broadcast_to(priors, lead + (I, J)), (-1, I, J))
    c = v = None
    for t in range(iterations):
        c = F.softmax_axis(b, axis=-1)
        if trace is not None:
            trace.append(c.data.reshape(lead + (I, J)).copy())
        s = F.einsum("pij,pijd->pjd", c, u)
        v = squash(s)
        if final_update or t < iterations - 1:
            b = b + F.einsum("pijd,pjd->pij", u, v)
    return (F.reshape(v, lead + (J, D)), F.reshape(c, lead + (I, J)), F.reshape(b, lead + (I, J)))


def _squash_np(s: np.ndarray, eps: float = SQUASH_EPS):
    sq = (s * s).sum(axis=-1, keepdims=True)
    n = np.sqrt(sq + eps * eps)
    denom = 1.0 + sq
    return s * (n / denom), (sq, n, denom)


def _squash_np_bw(s: np.ndarray, cache, g: np.ndarray) -> np.ndarray:
    sq, n, denom = cache
    dscale_dsq = 0.5 / (n * denom) - n / (denom * denom)
    gs = (g * s).sum(axis=-1, keepdims=True)
    return g * (n / denom) + s * (2.0 * dscale_dsq * gs)


def route(votes, iterations: int = 3, trace: Optional[List[np.ndarray]] = None) -> Tensor:
    """Parents of :func:`dynamic_routing` (zero priors) as a single graph node.

    Same arithmetic, but votes are held parent-major ``[P, J, I, D]`` so
    every reduction is a batched matrix product, and the backward pass
    replays the stored iterations by hand.
    """
    if iterations < 1:
        raise ContractError("routing needs at least one iteration")
    votes = as_tensor(votes)
    lead = votes.shape[:-3]
    I, J, D = votes.shape[-3:]
    u = np.ascontiguousarray(votes.data.reshape(-1, I, J, D).transpose(0, 2, 1, 3))  # [P, J, I, D]
    b = np.zeros(u.shape[:3])
    saved = []
    v = None
    for t in range(iterations):
        e = np.exp(b - b.max(axis=1, keepdims=True))
        c = e / e.sum(axis=1, keepdims=True)
        if trace is not None:
            trace.append(c.transpose(0, 2, 1).reshape(lead + (I, J)).copy())
        s = np.matmul(c[:, :, None, :], u)[:, :, 0]  # [P, J, D]
        v, cache = _squash_np(s)
        saved.append((c, s, cache, v))
        if t < iterations - 1:
            b = b + np.matmul(u, v[..., None])[..., 0]

    def _bw(g):
        gv_next = g.reshape(-1, J, D)
        gu = np.zeros_like(u)
        gb = np.zeros(u.shape[:3])  # gradient reaching b_{t+1}
        for t in range(iterations - 1, -1, -1):
            c, s, cache, v = saved[t]
            gv = gv_next if t == iterations - 1 else np.matmul(gb[:, :, None, :], u)[:, :, 0]
            if t < iterations - 1:
                gu += gb[..., None] * v[:, :, None, :]
            gs = _squash_np_bw(s, cache, gv)
            gc = np.matmul(u, gs[..., None])[..., 0]
            gu += c[..., None] * gs[:, :, None, :]
            gb = gb + c * (gc - (c * gc).sum(axis=1, keepdims=True))
            gv_next = None
        return (gu.transpose(0, 2, 1, 3).reshape(votes.shape),)

    return make_node(v.reshape(lead + (J, D)), (votes,), _bw)


@dataclass
class CapsuleLayerParams:
    """Transform ``M[*kernel, Cin, Din, Cout, Dout]`` shared over positions."""

    M: Tensor
    B: Optional[Tensor] = None
    iterations: int = 3
    stride: object = 1
    padding: object = 0
    mode: str = "conv"

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractError("routing needs at least one iteration")
        if self.mode not in ("conv", "deconv"):
            raise ValueError(f"unknown capsule layer mode {self.mode!r}")

    @property
    def out_types(self) -> int:
        return self.M.shape[-2]

    @property
    def out_dim(self) -> int:
        return self.M.shape[-1]


def _check_grid(grid: Tensor, params: CapsuleLayerParams, rank: int):
    if grid.ndim != rank + 3:
        raise ShapeError(f"capsule grid of rank {rank} needs {rank + 3} axes, got {grid.shape}")
    if params.M.ndim != rank + 4:
        raise ShapeError(f"transform {params.M.shape} does not have rank {rank}")
    if grid.shape[-2:] != params.M.shape[rank:rank + 2]:
        raise ShapeError(f"grid capsules {grid.shape[-2:]} do not match transform input {params.M.shape[rank:rank + 2]}")


def capsule_conv_nd(grid, params: CapsuleLayerParams, rank: int = 2,
                    trace: Optional[List[np.ndarray]] = None) -> Tensor:
    """Locally-constrained capsule convolution.

    Each output position routes the ``K * Cin`` children under its kernel
    window into ``Cout`` parent types using the shared transform.
    """
    grid = as_tensor(grid)
    if params.mode != "conv":
        raise ContractError("capsule_conv_nd needs a conv-mode layer")
    _check_grid(grid, params, rank)
    kernel = params.M.shape[:rank]
    K = int(np.prod(kernel))
    cin, din, cout, dout = params.M.shape[rank:]
    windows = unfold(grid, kernel, params.stride, params.padding, 1, rank=rank)
    out_sp = windows.shape[1:1 + rank]
    M = F.reshape(params.M, (K, cin, din, cout, dout))
    votes = compute_votes(windows, M, params.B)
    votes = F.reshape(votes, (-1, K * cin, cout, dout))
    parents = route(votes, params.iterations, trace=trace)
    return F.reshape(parents, (grid.shape[0],) + out_sp + (cout, dout))


def capsule_deconv_nd(grid, params: CapsuleLayerParams, rank: int = 2,
                      trace: Optional[List[np.ndarray]] = None, compact: bool = True) -> Tensor:
    """Deconvolutional capsules.

    Every child casts one vote per kernel offset; votes land on output
    positions with the transposed-convolution pattern ``o = i * stride + k``
    and each output position routes the votes that reached it.
    ``compact`` drops slots that can never receive a vote (same result).
    """
    grid = as_tensor(grid)
    if params.mode != "deconv":
        raise ContractError("capsule_deconv_nd needs a deconv-mode layer")
    _check_grid(grid, params, rank)
    kernel = params.M.shape[:rank]
    K = int(np.prod(kernel))
    cin, din, cout, dout = params.M.shape[rank:]
    n = grid.shape[0]
    in_sp = grid.shape[1:1 + rank]
    M = F.reshape(params.M, (K, cin, din, cout, dout))
    flat = F.reshape(grid, (-1, cin, din))
    votes = F.einsum("pcd,kcdje->pkcje", flat, M)
    if params.B is not None:
        votes = votes + params.B
    votes = F.reshape(votes, (n,) + in_sp + (K, cin, cout, dout))
    scatter = compact_scatter_slots if compact else scatter_slots
    slots = scatter(votes, kernel, params.stride, params.padding, rank=rank)
    out_sp = slots.shape[1:1 + rank]
    slots = F.reshape(slots, (-1, slots.shape[1 + rank] * cin, cout, dout))
    parents = route(slots, params.iterations, trace=trace)
    return F.reshape(parents, (n,) + out_sp + (cout, dout))


def fully_connected_routing(children, W, B=None, iterations: int = 3,
                            trace: Optional[List[np.ndarray]] = None) -> Tensor:
    """Classic capsule layer: ``children[N, I, Din]`` with a separate
    ``W[i, :, j, :]`` for every child/parent pair, routed into ``[N, J, Dout]``."""
    children, W = as_tensor(children), as_tensor(W)
    if children.shape[-2:] != W.shape[:2]:
        raise ShapeError(f"children {children.shape} do not match weights {W.shape}")
    votes = F.einsum("nid,idje->nije", children, W)
    if B is not None:
        votes = votes + B
    return route(votes, iterations, trace=trace)


def conv_out_spatial(in_sp, kernel, stride, padding, rank: int) -> tuple:
    kernel, stride, padding = (ntuple(v, rank) for v in (kernel, stride, padding))
    return tuple(conv_out_extent(n, k, s, p) for n, k, s, p in zip(in_sp, kernel, stride, padding))


def deconv_out_spatial(in_sp, kernel, stride, padding, rank: int) -> tuple:
    kernel, stride, padding = (ntuple(v, rank) for v in (kernel, stride, padding))
    return tuple(tconv_out_extent(n, k, s, p) for n, k, s, p in zip(in_sp, kernel, stride, padding))
