"""Segmentation loss stack and the self-supervised pretext loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import ShapeError, Tensor, as_tensor

M_PLUS = 0.9
M_MINUS = 0.1
LAMBDA = 0.5
GAMMA = 0.001


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(f"labels must lie in [0, {n_classes})")
    return np.eye(n_classes, dtype=np.float64)[labels]


def margin_loss(lengths, target_onehot, m_plus: float = M_PLUS, m_minus: float = M_MINUS,
                lam: float = LAMBDA) -> Tensor:
    """Mean over positions of the per-class hinge terms on capsule lengths.

    ``lengths[..., N]`` and ``target_onehot[..., N]`` share their shape.
    """
    lengths = as_tensor(lengths)
    t = np.asarray(target_onehot.data if isinstance(target_onehot, Tensor) else target_onehot, dtype=np.float64)
    if lengths.shape != t.shape:
        raise ShapeError(f"lengths {lengths.shape} and targets {t.shape} differ (class-count mismatch?)")
    present = F.square(F.relu(m_plus - lengths))
    absent = F.square(F.relu(lengths - m_minus))
    per_class = present * t + absent * (lam * (1.0 - t))
    positions = int(np.prod(t.shape[:-1])) if t.ndim > 1 else 1
    return F.sum(per_class) * (1.0 / positions)


def class_weights_from_labels(labels: np.ndarray, n_classes: int, lo: float = 0.1, hi: float = 10.0) -> np.ndarray:
    """Inverse class frequency, normalised so a balanced batch gets 1, clamped."""
    counts = np.bincount(np.asarray(labels).reshape(-1), minlength=n_classes).astype(np.float64)
    total = counts.sum()
    with np.errstate(divide="ignore"):
        w = total / (n_classes * counts)
    return np.clip(w, lo, hi)


def weighted_cross_entropy(logits, target: np.ndarray, class_weights=None) -> Tensor:
    """Mean over pixels of ``-w[t] * log softmax(logits)[t]``; classes on the last axis."""
    logits = as_tensor(logits)
    n = logits.shape[-1]
    target = np.asarray(target)
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"target {target.shape} does not match logits {logits.shape}")
    if target.size and target.max() >= n:
        raise ShapeError(f"target class {int(target.max())} out of range for {n} classes")
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("class weights must be non-negative")
    picked = one_hot(target, n) * w
    logp = F.log_softmax(logits, axis=-1)
    return F.sum(logp * picked) * (-1.0 / max(target.size, 1))


def masked_reconstruction_loss(image, output, mask, gamma: float = GAMMA) -> Tensor:
    """Squared error between ``image * mask`` and ``output``, scaled by
    ``gamma`` over the number of pixels.

    ``image`` and ``output`` are ``[N, C, *spatial]``; ``mask`` is
    ``[N, *spatial]`` with values in {0, 1}. The normaliser is
    ``N * prod(spatial)``, so a batch averages its per-image losses.
    """
    output = as_tensor(output)
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.shape != output.shape:
        raise ShapeError(f"image {image.shape} and reconstruction {output.shape} differ")
    if mask.shape != image.shape[:1] + image.shape[2:]:
        raise ShapeError(f"mask {mask.shape} does not match image {image.shape}")
    target = image * mask[:, None]
    diff = output - target
    return F.sum(F.square(diff)) * (gamma / mask.size)


@dataclass
class LossBreakdown:
    margin: Tensor
    cross_entropy: Tensor
    reconstruction: Tensor
    total: Tensor

    def values(self) -> dict:
        return {
            "loss_total": float(self.total.data),
            "loss_margin": float(self.margin.data),
            "loss_ce": float(self.cross_entropy.data),
            "loss_recon": float(self.reconstruction.data),
        }


def total_loss(margin, cross_entropy, reconstruction) -> LossBreakdown:
    """Unit-weight sum of the three segmentation losses."""
    parts = [as_tensor(p) for p in (margin, cross_entropy, reconstruction)]
    for name, p in zip(("margin", "cross_entropy", "reconstruction"), parts):
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError(f"non-finite {name} loss: {p.data}")
    total = parts[0] + parts[1] + parts[2]
    return LossBreakdown(parts[0], parts[1], parts[2], total)


def pretext_loss(vi, vj) -> Tensor:
    """``||vi - vj||_2 / sqrt(count)`` between two feature tensors."""
    vi, vj = as_tensor(vi), as_tensor(vj)
    if vi.shape != vj.shape:
        raise ShapeError(f"feature shapes differ: {vi.shape} vs {vj.shape}")
    diff = F.reshape(vi - vj, (-1,))
    return F.norm(diff, axis=0) * (1.0 / math.sqrt(diff.size))
