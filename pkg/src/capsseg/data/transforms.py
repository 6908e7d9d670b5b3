"""Image transformations for the reconstruction pretext task."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np
from scipy.ndimage import gaussian_filter1d

KINDS = ("identity", "zero_channel", "swap_patches", "blur", "noise")
BLUR_SIGMA = 1.0
NOISE_STD = 0.05


class UnsupportedTransform(ValueError):
    pass


@dataclass(frozen=True)
class TransformKind:
    kind: str
    channel: Optional[int] = None  # zero_channel only: 0=R, 1=G, 2=B
    seed: Optional[int] = None
    blur_sigma: float = BLUR_SIGMA
    noise_std: float = NOISE_STD

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform {self.kind!r}")

    @property
    def stochastic(self) -> bool:
        return self.kind in ("swap_patches", "noise")

    def with_seed(self, seed: int) -> "TransformKind":
        return replace(self, seed=seed)


def standard_transforms(channels: int) -> List[TransformKind]:
    """T0..T6 (identity, zero R/G/B, swap, blur, noise); the zero-channel
    entries are dropped for inputs with fewer than three channels."""
    ts = [TransformKind("identity")]
    if channels >= 3:
        ts += [TransformKind("zero_channel", channel=c) for c in range(3)]
    ts += [TransformKind("swap_patches"), TransformKind("blur"), TransformKind("noise")]
    return ts


def _swap_cells(spatial: tuple, rng: np.random.Generator):
    """Four distinct cells of a 4-per-axis grid, paired (a, b), (c, d)."""
    rank = len(spatial)
    patch = tuple(max(n // 4, 1) for n in spatial)
    cells = rng.choice(4 ** rank, size=4, replace=False)
    boxes = []
    for cell in cells:
        idx = np.unravel_index(int(cell), (4,) * rank)
        boxes.append(tuple(slice(i * p, i * p + p) for i, p in zip(idx, patch)))
    return [(boxes[0], boxes[1]), (boxes[2], boxes[3])]


def apply_transform(image: np.ndarray, t: TransformKind) -> np.ndarray:
    """Apply ``t`` to ``image[C, *spatial]``; extents and dtype are kept."""
    image = np.asarray(image)
    if t.kind == "identity":
        return image
    if t.kind == "zero_channel":
        if image.shape[0] < 3:
            raise UnsupportedTransform(f"zero_channel needs >= 3 channels, image has {image.shape[0]}")
        out = image.copy()
        out[t.channel] = 0
        return out
    if t.stochastic and t.seed is None:
        raise ValueError(f"{t.kind} needs a seed")
    if t.kind == "swap_patches":
        out = image.copy()
        for a, b in _swap_cells(image.shape[1:], np.random.default_rng(t.seed)):
            a, b = (slice(None),) + a, (slice(None),) + b
            out[a], out[b] = image[b], image[a]
        return out
    if t.kind == "blur":
        out = image.astype(np.float64)
        for axis in range(1, image.ndim):
            out = gaussian_filter1d(out, t.blur_sigma, axis=axis, truncate=2.0, mode="nearest")
        return out.astype(image.dtype)
    rng = np.random.default_rng(t.seed)
    noisy = image.astype(np.float64) + rng.normal(0.0, t.noise_std, size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(image.dtype)
