"""Network descriptions, parameter init and the forward pass for the
capsule segmentation models (2D SegCaps, 3D UCaps).

A network is a flat list of named layers. Each layer reads the outputs of
the layers listed in ``inputs`` (``"input"`` is the image), which is how
skip connections are wired. Channel tensors are ``[N, C, *spatial]`` and
capsule grids ``[N, *spatial, C, A]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import capsules as caps
from .autodiff import functional as F
from .autodiff.conv import conv_nd, conv_out_extent, same_padding, tconv_out_extent, transposed_conv_nd
from .autodiff.tensor import ShapeError, Tensor, as_tensor, no_grad
from .losses import (GAMMA, LAMBDA, M_MINUS, M_PLUS, LossBreakdown, class_weights_from_labels, margin_loss,
                     masked_reconstruction_loss, one_hot, total_loss, weighted_cross_entropy)

LAYER_KINDS = ("conv", "tconv", "bn", "concat", "primary_caps", "caps_conv", "caps_deconv", "caps_concat",
               "caps_to_channels", "caps_mask")
ACTIVATIONS = ("none", "relu", "sigmoid")
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
CAPS_INIT_GAIN = 2.5


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: Tuple[str, ...]
    out: int = 0  # channels, or capsule types
    dim: int = 0  # capsule dimension
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    iterations: int = 3
    activation: str = "none"
    bias: bool = False
    zero_init: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class Shape:
    """Per-sample shape: ``channels`` is set for channel tensors, ``types``
    and ``dim`` for capsule grids."""

    spatial: Tuple[int, ...]
    channels: int = 0
    types: int = 0
    dim: int = 0

    @property
    def is_caps(self) -> bool:
        return self.types > 0


@dataclass(frozen=True)
class NetworkSpec:
    arch: str
    rank: int
    input_size: Tuple[int, ...]
    in_channels: int
    n_classes: int
    layers: Tuple[LayerSpec, ...]
    final_caps: str  # margin loss and length map
    logits: str  # class logits [N, n_classes, *spatial]
    recon: Optional[str]  # reconstruction output, None when the branch is off
    extractor: Tuple[str, ...]  # feature extractor layers (self-supervised pretext)
    multi: bool = False  # Multi-SegCaps: predict by longest capsule

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def extractor_output(self) -> str:
        return self.extractor[-1]


# ---------------------------------------------------------------- shapes


def _check_divisible(size: int, factor: int, what: str):
    if size % factor:
        raise ShapeError(f"{what}: spatial size {size} is not divisible by {factor}")


def infer_shapes(spec: NetworkSpec) -> Dict[str, Shape]:
    """Per-layer output shapes; raises ShapeError on inconsistent wiring."""
    shapes = {"input": Shape(tuple(spec.input_size), channels=spec.in_channels)}
    r = spec.rank
    for l in spec.layers:
        if l.name in shapes:
            raise ShapeError(f"duplicate layer name {l.name!r}")
        missing = [i for i in l.inputs if i not in shapes]
        if missing:
            raise ShapeError(f"{l.name}: unknown inputs {missing}")
        ins = [shapes[i] for i in l.inputs]
        a = ins[0]
        if l.kind in ("concat", "caps_concat"):
            if any(s.spatial != a.spatial for s in ins):
                raise ShapeError(f"{l.name}: skip connection joins extents {[s.spatial for s in ins]}")
        if l.kind in ("conv", "tconv", "bn", "concat", "primary_caps") and any(s.is_caps for s in ins):
            raise ShapeError(f"{l.name}: {l.kind} needs channel inputs")
        if l.kind in ("caps_conv", "caps_deconv", "caps_concat", "caps_to_channels", "caps_mask") \
                and not all(s.is_caps for s in ins):
            raise ShapeError(f"{l.name}: {l.kind} needs capsule inputs")
        if l.kind == "conv":
            sp = tuple(conv_out_extent(n, l.kernel, l.stride, l.padding, l.dilation) for n in a.spatial)
            out = Shape(sp, channels=l.out)
        elif l.kind == "tconv":
            sp = tuple(tconv_out_extent(n, l.kernel, l.stride, l.padding, l.dilation) for n in a.spatial)
            out = Shape(sp, channels=l.out)
        elif l.kind == "bn":
            out = a
        elif l.kind == "concat":
            out = Shape(a.spatial, channels=sum(s.channels for s in ins))
        elif l.kind == "primary_caps":
            if a.channels % l.dim:
                raise ShapeError(f"{l.name}: {a.channels} channels not divisible by capsule dim {l.dim}")
            out = Shape(a.spatial, types=a.channels // l.dim, dim=l.dim)
        elif l.kind == "caps_conv":
            for n in a.spatial:
                if n + 2 * l.padding < l.kernel:
                    raise ShapeError(f"{l.name}: kernel {l.kernel} larger than padded extent {n}")
            sp = tuple(conv_out_extent(n, l.kernel, l.stride, l.padding) for n in a.spatial)
            out = Shape(sp, types=l.out, dim=l.dim)
        elif l.kind == "caps_deconv":
            sp = tuple(tconv_out_extent(n, l.kernel, l.stride, l.padding) for n in a.spatial)
            out = Shape(sp, types=l.out, dim=l.dim)
        elif l.kind == "caps_concat":
            if any(s.dim != a.dim for s in ins):
                raise ShapeError(f"{l.name}: capsule dims differ {[s.dim for s in ins]}")
            out = Shape(a.spatial, types=sum(s.types for s in ins), dim=a.dim)
        elif l.kind == "caps_to_channels":
            out = Shape(a.spatial, channels=a.types * a.dim)
        else:  # caps_mask keeps the grid, zeroing non-selected capsules
            out = a
        if any(n < 1 for n in out.spatial):
            raise ShapeError(f"{l.name}: empty output extent {out.spatial}")
        shapes[l.name] = out
    fin = shapes[spec.final_caps]
    if fin.types != spec.n_classes:
        raise ShapeError(f"final capsule layer has {fin.types} types for {spec.n_classes} classes")
    lg = shapes[spec.logits]
    if lg.channels != spec.n_classes or lg.spatial != tuple(spec.input_size):
        raise ShapeError(f"logit layer shape {lg} does not give {spec.n_classes} full-resolution maps")
    if spec.recon is not None:
        rc = shapes[spec.recon]
        if rc.channels != spec.in_channels:
            raise ShapeError(f"reconstruction has {rc.channels} channels, input {spec.in_channels}")
        for n, m in zip(spec.input_size, rc.spatial):
            _check_divisible(n, m, "reconstruction resolution")
    for n, m in zip(spec.input_size, fin.spatial):
        _check_divisible(n, m, "final capsule resolution")
    return shapes


# ---------------------------------------------------------------- builders


def build_segcaps2d(input_size, n_classes: int = 2, base_channels: int = 16,
                    capsule_type_schedule: Sequence[int] = (1, 2, 4, 4, 8, 8), capsule_dim: int = 16,
                    depth: int = 3, toy: bool = True, in_channels: int = 1, iterations: int = 3,
                    reconstruction: bool = True, recon_channels: Sequence[int] = (64, 128),
                    multi: Optional[bool] = None) -> NetworkSpec:
    """2D SegCaps: conv extractor, primary capsules, strided capsule encoder,
    deconvolutional capsule decoder with skips, N-type segmentation capsules.

    ``toy`` divides feature channels, capsule dims and reconstruction
    widths by 4 and keeps one capsule layer per level; otherwise each
    level has a strided layer followed by a stride-1 layer.
    Level ``l`` uses ``schedule[2l - 1]`` (strided) and ``schedule[2l]``
    capsule types, clamped to the schedule length.
    """
    size = (input_size,) * 2 if isinstance(input_size, int) else tuple(input_size)
    if len(size) != 2:
        raise ShapeError("build_segcaps2d needs a 2D input size")
    for n in size:
        _check_divisible(n, 2 ** depth, f"depth {depth}")
    if toy:
        base_channels = max(1, base_channels // 4)
        capsule_dim = max(2, capsule_dim // 4)
        recon_channels = tuple(max(1, c // 4) for c in recon_channels)
    sched = tuple(capsule_type_schedule)

    def types(i):
        return sched[min(i, len(sched) - 1)]

    d = capsule_dim
    L: List[LayerSpec] = [
        LayerSpec("conv1", "conv", ("input",), out=base_channels, kernel=5, padding=2, activation="relu",
                  bias=True),
        LayerSpec("primary", "primary_caps", ("conv1",), dim=d),
    ]
    skips = ["primary"]
    prev = "primary"
    for lvl in range(1, depth + 1):
        name = f"enc{lvl}"
        L.append(LayerSpec(name, "caps_conv", (prev,), out=types(2 * lvl - 1), dim=d, kernel=5, stride=2,
                           padding=2, iterations=iterations))
        prev = name
        if not toy:
            L.append(LayerSpec(f"enc{lvl}b", "caps_conv", (prev,), out=types(2 * lvl), dim=d, kernel=5,
                               padding=2, iterations=iterations))
            prev = f"enc{lvl}b"
        skips.append(prev)
    # decoder: deconv up one level, then join with the encoder grid of that extent
    for lvl in range(depth, 0, -1):
        target = skips[lvl - 1]
        t_types = types(0) if lvl == 1 else types(2 * (lvl - 1) - (1 if toy else 0))
        name = f"dec{lvl}"
        L.append(LayerSpec(name, "caps_deconv", (prev,), out=t_types, dim=d, kernel=4, stride=2, padding=1,
                           iterations=iterations))
        L.append(LayerSpec(f"{name}_skip", "caps_concat", (name, target)))
        prev = f"{name}_skip"
        if not toy:
            L.append(LayerSpec(f"{name}b", "caps_conv", (prev,), out=t_types, dim=d, kernel=5, padding=2,
                               iterations=iterations))
            prev = f"{name}b"
    L.append(LayerSpec("segcaps", "caps_conv", (prev,), out=n_classes, dim=d, kernel=1, iterations=iterations))
    L.append(LayerSpec("seg_channels", "caps_to_channels", ("segcaps",)))
    L.append(LayerSpec("logits", "conv", ("seg_channels",), out=n_classes, kernel=1, bias=True, zero_init=True))
    recon = None
    if reconstruction:
        L.append(LayerSpec("recon_mask", "caps_mask", ("segcaps",)))
        L.append(LayerSpec("recon_in", "caps_to_channels", ("recon_mask",)))
        prev = "recon_in"
        for i, c in enumerate(recon_channels):
            L.append(LayerSpec(f"recon{i + 1}", "conv", (prev,), out=c, kernel=1, activation="relu", bias=True))
            prev = f"recon{i + 1}"
        L.append(LayerSpec("recon_out", "conv", (prev,), out=in_channels, kernel=1, activation="sigmoid",
                           bias=True))
        recon = "recon_out"
    spec = NetworkSpec("segcaps2d", 2, size, in_channels, n_classes, tuple(L), "segcaps", "logits", recon,
                       ("conv1",), multi=n_classes > 2 if multi is None else multi)
    infer_shapes(spec)
    return spec


def build_ucaps3d(input_size, n_classes: int = 2, extractor_channels: Sequence[int] = (16, 32, 64),
                  dilations: Sequence[int] = (1, 3, 3), capsule_types: Sequence[int] = (16, 16, 16, 8, 8, 8),
                  capsule_strides: Sequence[int] = (2, 1, 2, 1, 2, 1), capsule_dim: int = 16,
                  primary_dim: int = 16, toy: bool = True, in_channels: int = 1, iterations: int = 3,
                  reconstruction: bool = True, recon_channels: Sequence[int] = (64, 128)) -> NetworkSpec:
    """3D UCaps: dilated conv extractor, capsule encoder, and a plain
    convolutional decoder (transposed conv, skip join, conv, batch norm,
    ReLU) fed by capsule grids flattened to ``types * dim`` channels.

    The last capsule layer always has ``n_classes`` types. ``toy`` divides
    every channel, type and dimension count by 4.
    """
    size = (input_size,) * 3 if isinstance(input_size, int) else tuple(input_size)
    if len(size) != 3:
        raise ShapeError("build_ucaps3d needs a 3D input size")
    if len(capsule_types) != len(capsule_strides):
        raise ValueError("capsule_types and capsule_strides differ in length")
    down = int(np.prod(capsule_strides))
    for n in size:
        _check_divisible(n, down, "capsule encoder strides")
    q = 4 if toy else 1
    ext = tuple(max(1, c // q) for c in extractor_channels)
    ctypes = [max(1, t // q) for t in capsule_types]
    ctypes[-1] = n_classes
    d = max(2, capsule_dim // q)
    pd = max(2, primary_dim // q)
    rc = tuple(max(1, c // q) for c in recon_channels)
    L: List[LayerSpec] = []
    prev = "input"
    for i, (c, dil) in enumerate(zip(ext, dilations)):
        L.append(LayerSpec(f"ext{i + 1}", "conv", (prev,), out=c, kernel=5, dilation=dil,
                           padding=same_padding(5, dil), activation="relu", bias=True))
        prev = f"ext{i + 1}"
    extractor = tuple(l.name for l in L)
    L.append(LayerSpec("primary", "primary_caps", (prev,), dim=pd))
    prev = "primary"
    # the last capsule layer at each resolution feeds the decoder skip
    level_out: List[Tuple[str, int]] = []
    scale = 1
    for i, (t, s) in enumerate(zip(ctypes, capsule_strides)):
        name = f"caps{i + 1}"
        L.append(LayerSpec(name, "caps_conv", (prev,), out=t, dim=d, kernel=3, stride=s, padding=1,
                           iterations=iterations))
        scale *= s
        if level_out and level_out[-1][1] == scale:
            level_out[-1] = (name, scale)
        else:
            level_out.append((name, scale))
        prev = name
    final_caps = prev
    skips = [(extractor[-1], 1)] + [lo for lo in level_out[:-1] if lo[1] > 1]
    x = f"{final_caps}_ch"
    L.append(LayerSpec(x, "caps_to_channels", (final_caps,)))
    cur_scale = level_out[-1][1]
    width = max(2, 32 // q)
    for j, (skip, sk_scale) in enumerate(reversed(skips)):
        factor = cur_scale // sk_scale
        if factor not in (1, 2, 4):
            raise ShapeError(f"decoder step of {factor}x is unsupported")
        up = f"up{j + 1}"
        if factor > 1:
            L.append(LayerSpec(up, "tconv", (x,), out=width, kernel=2 * factor, stride=factor,
                               padding=factor // 2, bias=True))
        else:
            L.append(LayerSpec(up, "conv", (x,), out=width, kernel=3, padding=1, bias=True))
        src = skip
        if skip != extractor[-1]:
            L.append(LayerSpec(f"{skip}_ch", "caps_to_channels", (skip,)))
            src = f"{skip}_ch"
        L.append(LayerSpec(f"join{j + 1}", "concat", (up, src)))
        L.append(LayerSpec(f"dconv{j + 1}", "conv", (f"join{j + 1}",), out=width, kernel=3, padding=1, bias=True))
        L.append(LayerSpec(f"bn{j + 1}", "bn", (f"dconv{j + 1}",), activation="relu"))
        x = f"bn{j + 1}"
        cur_scale = sk_scale
    L.append(LayerSpec("logits", "conv", (x,), out=n_classes, kernel=1, bias=True, zero_init=True))
    recon = None
    if reconstruction:
        L.append(LayerSpec("recon_mask", "caps_mask", (final_caps,)))
        L.append(LayerSpec("recon_in", "caps_to_channels", ("recon_mask",)))
        prev = "recon_in"
        for i, c in enumerate(rc):
            L.append(LayerSpec(f"recon{i + 1}", "conv", (prev,), out=c, kernel=1, activation="relu", bias=True))
            prev = f"recon{i + 1}"
        L.append(LayerSpec("recon_out", "conv", (prev,), out=in_channels, kernel=1, activation="sigmoid",
                           bias=True))
        recon = "recon_out"
    spec = NetworkSpec("ucaps3d", 3, size, in_channels, n_classes, tuple(L), final_caps, "logits", recon,
                       extractor, multi=False)
    infer_shapes(spec)
    return spec


def build_network(arch: str, input_size, n_classes: int, **kw) -> NetworkSpec:
    if arch == "segcaps2d":
        return build_segcaps2d(input_size, n_classes, **kw)
    if arch == "ucaps3d":
        return build_ucaps3d(input_size, n_classes, **kw)
    raise ValueError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------- parameters


@dataclass
class ModelParams:
    """Trainable tensors and non-trainable buffers, both in layer order."""

    tensors: Dict[str, Tensor]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def manifest(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.tensors.items()] + [(k, v.shape) for k, v in self.buffers.items()]

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.tensors.items()}
        out.update(self.buffers)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def subset(self, prefixes: Sequence[str]) -> Dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.split(".")[0] in prefixes}

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy values in by name; ``strict`` requires the full manifest."""
        mine = dict(self.manifest())
        problems = []
        for k, a in arrays.items():
            if k not in mine:
                problems.append(f"unexpected {k}")
            elif tuple(a.shape) != tuple(mine[k]):
                problems.append(f"{k}: stored {tuple(a.shape)}, expected {tuple(mine[k])}")
        if strict:
            problems += [f"missing {k}" for k in mine if k not in arrays]
        if problems:
            raise ShapeError("parameter manifest mismatch: " + "; ".join(problems))
        for k, a in arrays.items():
            if k in self.tensors:
                self.tensors[k].data = np.array(a, dtype=np.float64)
            else:
                self.buffers[k] = np.array(a, dtype=np.float64)


def init_params(spec: NetworkSpec, seed: int) -> ModelParams:
    """Deterministic initialization from ``seed``; every tensor draws from
    its own generator keyed by (seed, layer index)."""
    shapes = infer_shapes(spec)
    tensors: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    r = spec.rank
    for idx, l in enumerate(spec.layers):
        rng = np.random.default_rng([seed, idx])
        a = shapes[l.inputs[0]]
        if l.kind in ("conv", "tconv"):
            cin = sum(shapes[i].channels for i in l.inputs)
            wshape = (l.out, cin) if l.kind == "conv" else (cin, l.out)
            wshape += (l.kernel,) * r
            if l.zero_init:
                w = np.zeros(wshape)
            else:
                fan_in = cin * l.kernel ** r
                gain = 2.0 if l.activation == "relu" else 1.0
                bound = math.sqrt(3.0 * gain / fan_in)
                w = rng.uniform(-bound, bound, size=wshape)
            tensors[f"{l.name}.weight"] = Tensor(w, requires_grad=True)
            if l.bias:
                tensors[f"{l.name}.bias"] = Tensor(np.zeros(l.out), requires_grad=True)
        elif l.kind in ("caps_conv", "caps_deconv"):
            n_children = a.types * (l.kernel ** r if l.kind == "caps_conv" else
                                    int(np.prod([math.ceil(l.kernel / l.stride)] * r)))
            # the gain offsets squash shrinking short vectors, so lengths survive deep stacks
            std = CAPS_INIT_GAIN * l.out / math.sqrt(l.dim * n_children)
            mshape = (l.kernel,) * r + (a.types, a.dim, l.out, l.dim)
            tensors[f"{l.name}.M"] = Tensor(rng.normal(0.0, std, size=mshape), requires_grad=True)
            if l.bias:
                tensors[f"{l.name}.B"] = Tensor(np.zeros((l.out, l.dim)), requires_grad=True)
        elif l.kind == "bn":
            c = a.channels
            tensors[f"{l.name}.gamma"] = Tensor(np.ones(c), requires_grad=True)
            tensors[f"{l.name}.beta"] = Tensor(np.zeros(c), requires_grad=True)
            buffers[f"{l.name}.running_mean"] = np.zeros(c)
            buffers[f"{l.name}.running_var"] = np.ones(c)
    return ModelParams(tensors, buffers)


# ---------------------------------------------------------------- forward


def _activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return F.relu(x)
    if kind == "sigmoid":
        return F.sigmoid(x)
    return x


def _bias_shape(c: int, rank: int) -> tuple:
    return (1, c) + (1,) * rank


def _batch_norm(x: Tensor, l: LayerSpec, params: ModelParams, rank: int, train: bool) -> Tensor:
    axes = (0,) + tuple(range(2, 2 + rank))
    c = x.shape[1]
    gamma = F.reshape(params.tensors[f"{l.name}.gamma"], _bias_shape(c, rank))
    beta = F.reshape(params.tensors[f"{l.name}.beta"], _bias_shape(c, rank))
    rm, rv = f"{l.name}.running_mean", f"{l.name}.running_var"
    if train:
        mu = F.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = F.mean(F.square(centered), axis=axes, keepdims=True)
        count = x.data.size // c
        unbiased = var.data.reshape(c) * (count / max(count - 1, 1))
        params.buffers[rm] = BN_MOMENTUM * params.buffers[rm] + (1 - BN_MOMENTUM) * mu.data.reshape(c)
        params.buffers[rv] = BN_MOMENTUM * params.buffers[rv] + (1 - BN_MOMENTUM) * unbiased
        xhat = centered / F.sqrt(var + BN_EPS)
    else:
        mu = params.buffers[rm].reshape(_bias_shape(c, rank))
        var = params.buffers[rv].reshape(_bias_shape(c, rank))
        xhat = (x - mu) * (1.0 / np.sqrt(var + BN_EPS))
    return xhat * gamma + beta


def _caps_mask(grid: Tensor, labels: Optional[np.ndarray], rank: int) -> Tensor:
    """Keep only the capsule of the selected class at each position; the
    background class (0) is never kept."""
    if labels is None:
        labels = caps.capsule_lengths(grid).data.argmax(axis=-1)
    sel = one_hot(labels, grid.shape[-2])
    sel[..., 0] = 0.0
    return grid * sel[..., None]


def downsample_labels(labels: np.ndarray, spatial: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour reduction of ``labels[N, *sp]`` to ``spatial``;
    output ``o`` reads input ``o * f + f // 2``."""
    labels = np.asarray(labels)
    idx = []
    for n, m in zip(labels.shape[1:], spatial):
        f = n // m
        idx.append(np.arange(m) * f + f // 2)
    return labels[np.ix_(np.arange(labels.shape[0]), *idx)]


def downsample_image(image: np.ndarray, spatial: Sequence[int]) -> np.ndarray:
    image = np.asarray(image)
    idx = []
    for n, m in zip(image.shape[2:], spatial):
        f = n // m
        idx.append(np.arange(m) * f + f // 2)
    return image[np.ix_(np.arange(image.shape[0]), np.arange(image.shape[1]), *idx)]


def run_layers(spec: NetworkSpec, params: ModelParams, x, outputs: Sequence[str],
               labels: Optional[np.ndarray] = None, train: bool = False) -> Dict[str, Tensor]:
    """Evaluate only the layers needed for ``outputs``.

    ``labels`` (at the final capsule resolution) select the capsules fed to
    the reconstruction branch; without them the longest capsule is used.
    """
    x = as_tensor(x)
    expect = (spec.in_channels,) + tuple(spec.input_size)
    if x.ndim != spec.rank + 2 or x.shape[1:] != expect:
        raise ShapeError(f"input {x.shape} does not match network input [N, {expect}]")
    by_name = {l.name: l for l in spec.layers}
    needed = set()
    stack = list(outputs)
    while stack:
        n = stack.pop()
        if n == "input" or n in needed:
            continue
        if n not in by_name:
            raise KeyError(f"no layer named {n!r}")
        needed.add(n)
        stack.extend(by_name[n].inputs)
    vals: Dict[str, Tensor] = {"input": x}
    r = spec.rank
    p = params.tensors
    for l in spec.layers:
        if l.name not in needed:
            continue
        ins = [vals[i] for i in l.inputs]
        a = ins[0]
        if l.kind == "conv":
            y = conv_nd(a, p[f"{l.name}.weight"], l.stride, l.padding, l.dilation, rank=r)
        elif l.kind == "tconv":
            y = transposed_conv_nd(a, p[f"{l.name}.weight"], l.stride, l.padding, l.dilation, rank=r)
        elif l.kind == "bn":
            y = _batch_norm(a, l, params, r, train)
        elif l.kind == "concat":
            y = F.concat(ins, axis=1)
        elif l.kind == "primary_caps":
            y = caps.squash(caps.to_primary_capsules(a, l.dim, rank=r))
        elif l.kind in ("caps_conv", "caps_deconv"):
            lp = caps.CapsuleLayerParams(p[f"{l.name}.M"], p.get(f"{l.name}.B"), l.iterations, l.stride,
                                         l.padding, mode="conv" if l.kind == "caps_conv" else "deconv")
            if l.kind == "caps_conv":
                y = caps.capsule_conv_nd(a, lp, rank=r)
            else:
                y = caps.capsule_deconv_nd(a, lp, rank=r)
        elif l.kind == "caps_concat":
            y = F.concat(ins, axis=-2)
        elif l.kind == "caps_to_channels":
            y = caps.capsules_to_channels(a, rank=r)
        else:
            y = _caps_mask(a, labels, r)
        if l.kind in ("conv", "tconv") and l.bias:
            y = y + F.reshape(p[f"{l.name}.bias"], _bias_shape(l.out, r))
        if l.kind in ("conv", "tconv", "bn"):
            y = _activate(y, l.activation)
        vals[l.name] = y
    return {k: vals[k] for k in outputs}


@dataclass
class SegOutput:
    probs: Tensor  # [N, n_classes, *spatial]
    lengths: Tensor  # [N, *final spatial, n_classes]
    recon: Optional[Tensor]  # [N, C, *recon spatial]
    logits: Tensor


def forward_segment(spec: NetworkSpec, params: ModelParams, x, labels: Optional[np.ndarray] = None,
                    train: bool = False, with_recon: bool = True) -> SegOutput:
    """Class probabilities (softmax over the decoder logits), capsule
    lengths of the final capsule layer and the reconstruction.

    ``labels[N, *spatial]`` are full-resolution ground truth; they are
    reduced to the final capsule extent for the reconstruction mask.
    """
    outs = [spec.logits, spec.final_caps]
    if with_recon and spec.recon is not None:
        outs.append(spec.recon)
    if labels is not None:
        fin = infer_shapes(spec)[spec.final_caps].spatial
        labels = downsample_labels(labels, fin)
    vals = run_layers(spec, params, x, outs, labels=labels, train=train)
    logits = vals[spec.logits]
    probs = F.softmax_axis(logits, axis=1)
    lengths = caps.capsule_lengths(vals[spec.final_caps])
    return SegOutput(probs, lengths, vals.get(spec.recon) if spec.recon else None, logits)


def predict_labels(spec: NetworkSpec, out: SegOutput, rule: Optional[str] = None) -> np.ndarray:
    """Per-pixel labels: ``"probability"`` takes the argmax of the class
    probabilities, ``"length"`` the longest final capsule (upsampled by
    repetition when the capsule grid is coarser). Multi-class SegCaps
    defaults to the length rule."""
    rule = rule or ("length" if spec.multi else "probability")
    if rule == "probability":
        return out.probs.data.argmax(axis=1).astype(np.uint8)
    if rule != "length":
        raise ValueError(f"unknown prediction rule {rule!r}")
    lab = out.lengths.data.argmax(axis=-1)
    for axis, (n, m) in enumerate(zip(spec.input_size, lab.shape[1:]), start=1):
        lab = np.repeat(lab, n // m, axis=axis)
    return lab.astype(np.uint8)


def predict(spec: NetworkSpec, params: ModelParams, images: np.ndarray, batch_size: int = 4,
            rule: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Inference over a stack of images: (labels, probabilities)."""
    labels, probs = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out = forward_segment(spec, params, np.asarray(images[i:i + batch_size], dtype=np.float64),
                                  with_recon=False)
            labels.append(predict_labels(spec, out, rule))
            probs.append(out.probs.data)
    return np.concatenate(labels), np.concatenate(probs)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = GAMMA
    m_plus: float = M_PLUS
    m_minus: float = M_MINUS
    lam: float = LAMBDA
    class_weighting: bool = True


def segmentation_loss(spec: NetworkSpec, params: ModelParams, images: np.ndarray, masks: np.ndarray,
                      cfg: LossConfig = LossConfig(), train: bool = True, return_output: bool = False):
    """Margin loss on the final capsules, weighted CE on the logits and the
    masked reconstruction, at the final capsule resolution.

    Returns the :class:`LossBreakdown`, paired with the forward output when
    ``return_output`` is set.
    """
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks)
    if masks.size and int(masks.max()) >= spec.n_classes:
        raise ShapeError(f"mask label {int(masks.max())} exceeds {spec.n_classes} classes")
    out = forward_segment(spec, params, images, labels=masks, train=train, with_recon=spec.recon is not None)
    fin = out.lengths.shape[1:-1]
    small = downsample_labels(masks, fin)
    margin = margin_loss(out.lengths, one_hot(small, spec.n_classes), cfg.m_plus, cfg.m_minus, cfg.lam)
    w = class_weights_from_labels(masks, spec.n_classes) if cfg.class_weighting else None
    logits_last = F.moveaxis(out.logits, 1, -1)
    ce = weighted_cross_entropy(logits_last, masks, w)
    if out.recon is not None:
        target = downsample_image(images, out.recon.shape[2:])
        recon = masked_reconstruction_loss(target, out.recon, (small > 0).astype(np.float64), cfg.gamma)
    else:
        recon = Tensor(np.array(0.0))
    parts = total_loss(margin, ce, recon)
    return (parts, out) if return_output else parts


# ---------------------------------------------------------------- self-supervised pretraining


def extractor_features(spec: NetworkSpec, params: ModelParams, x) -> Tensor:
    return run_layers(spec, params, x, [spec.extractor_output])[spec.extractor_output]


@dataclass
class PretrainResult:
    params: ModelParams
    losses: List[float]
    optimizer: object = None


def ssl_pretrain(spec: NetworkSpec, params: ModelParams, images: np.ndarray, transforms, steps: int, seed: int,
                 lr: float = 1e-4, batch_size: int = 2, callback=None) -> PretrainResult:
    """Train the feature extractor so two transformed views of an image map
    to the same features.

    Each step draws a batch of images and, per image, two transforms
    independently and uniformly from ``transforms``; stochastic transforms
    get a fresh seed per application. Only extractor parameters change.
    """
    from .autodiff.optim import OptimizerState, adam_step
    from .autodiff.tensor import backward
    from .data.transforms import apply_transform
    from .losses import pretext_loss

    transforms = list(transforms)
    if not transforms:
        raise ValueError("empty transform set")
    if len(images) == 0:
        raise ValueError("no images to pretrain on")
    params = params.copy()
    trainable = params.subset(spec.extractor)
    opt = OptimizerState.for_params(trainable, lr=lr)
    losses = []
    for step in range(steps):
        rng = np.random.default_rng([seed, step])
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        vi, vj = [], []
        for k in idx:
            ti, tj = (transforms[int(t)] for t in rng.integers(len(transforms), size=2))
            si, sj = (int(s) for s in rng.integers(2 ** 63 - 1, size=2))
            vi.append(apply_transform(images[k], ti.with_seed(si) if ti.stochastic else ti))
            vj.append(apply_transform(images[k], tj.with_seed(sj) if tj.stochastic else tj))
        for t in trainable.values():
            t.grad = None
        fi = extractor_features(spec, params, np.stack(vi).astype(np.float64))
        fj = extractor_features(spec, params, np.stack(vj).astype(np.float64))
        loss = pretext_loss(fi, fj)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite pretext loss at step {step}")
        backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in trainable.items()}
        adam_step(opt, trainable, grads)
        losses.append(float(loss.data))
        if callback is not None:
            callback(step, float(loss.data))
    return PretrainResult(params, losses, opt)


def finetune(spec: NetworkSpec, init: ModelParams, train_set, val_set, config, **kw):
    """Supervised training from ``init`` (random or pretrained weights);
    see :func:`capsseg.training.train_model`."""
    from .training import train_model

    return train_model(spec, init, train_set, val_set, config, **kw)
