"""Seeded synthetic segmentation datasets (2D shapes, 3D blobs)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


@dataclass
class SegSample:
    """``image[C, *spatial]`` float32 in [0, 1]; ``mask[*spatial]`` uint8 labels."""

    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} spatial extents differ")

    @property
    def rank(self) -> int:
        return self.mask.ndim


@dataclass
class Dataset:
    samples: List[SegSample]
    n_classes: int
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            self.names = [f"{i:05d}" for i in range(len(self.samples))]
        for s in self.samples:
            if s.mask.size and int(s.mask.max()) >= self.n_classes:
                raise ValueError(f"mask label {int(s.mask.max())} >= n_classes {self.n_classes}")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> SegSample:
        return self.samples[i]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.n_classes, [self.names[i] for i in indices])

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])


BACKGROUND = (0.05, 0.35)
FOREGROUND = (0.5, 0.9)
NOISE_STD = 0.06


def _check(size: int, n_classes: int):
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if n_classes not in (2, 3):
        raise ValueError(f"n_classes must be 2 or 3, got {n_classes}")


def _render(rng: np.random.Generator, size: int, rank: int, n_classes: int, channels: int) -> SegSample:
    coords = np.meshgrid(*(np.arange(size, dtype=np.float64),) * rank, indexing="ij")
    bg = rng.uniform(*BACKGROUND)
    img = np.full((size,) * rank, bg)
    mask = np.zeros((size,) * rank, dtype=np.uint8)
    for _ in range(int(rng.integers(1, 4))):
        kind = int(rng.integers(2))  # 0 round, 1 box
        label = 1 if n_classes == 2 else 1 + kind
        lo, hi = (size / 12, size / 6) if rank == 2 else (size / 8, size / 4)
        extent = rng.uniform(lo, hi, size=rank)
        center = np.array([rng.uniform(e, size - 1 - e) for e in extent])
        if kind == 0:
            r = extent[0]
            region = sum((c - m) ** 2 for c, m in zip(coords, center)) <= r * r
        else:
            region = np.ones_like(mask, dtype=bool)
            for c, m, e in zip(coords, center, extent):
                region &= np.abs(c - m) <= e
        img[region] = rng.uniform(*FOREGROUND)
        mask[region] = label
    img = img + rng.normal(0.0, NOISE_STD, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    image = np.repeat(img[None], channels, axis=0).astype(np.float32)
    return SegSample(image, mask)


def gen_shapes_2d(seed: int, count: int, size: int = 64, n_classes: int = 2, channels: int = 1) -> Dataset:
    """Noisy background with 1-3 discs or rectangles per image.

    With three classes discs are label 1 and rectangles label 2.
    """
    _check(size, n_classes)
    rng = np.random.default_rng(seed)
    return Dataset([_render(rng, size, 2, n_classes, channels) for _ in range(count)], n_classes)


def gen_blobs_3d(seed: int, count: int, size: int = 32, n_classes: int = 2, channels: int = 1) -> Dataset:
    """Volumes with 1-3 spheres or cuboids on a noisy background."""
    _check(size, n_classes)
    rng = np.random.default_rng(seed)
    return Dataset([_render(rng, size, 3, n_classes, channels) for _ in range(count)], n_classes)


def sphere_mask(size: int, radius: float, center: Optional[tuple] = None) -> np.ndarray:
    c = np.full(3, (size - 1) / 2.0) if center is None else np.asarray(center, dtype=np.float64)
    coords = np.meshgrid(*(np.arange(size, dtype=np.float64),) * 3, indexing="ij")
    return (sum((g - m) ** 2 for g, m in zip(coords, c)) <= radius * radius).astype(np.uint8)


def centered_blob_3d(seed: int, size: int = 16, radius: float = 4.5, channels: int = 1,
                     noise_std: float = NOISE_STD) -> SegSample:
    """A sphere at the exact volume centre: unchanged by 90-degree turns
    about any axis when ``noise_std`` is 0."""
    rng = np.random.default_rng(seed)
    mask = sphere_mask(size, radius)
    img = np.where(mask > 0, rng.uniform(*FOREGROUND), rng.uniform(*BACKGROUND))
    if noise_std > 0:
        img = np.clip(img + rng.normal(0.0, noise_std, size=img.shape), 0.0, 1.0)
    return SegSample(np.repeat(img[None], channels, axis=0).astype(np.float32), mask)
