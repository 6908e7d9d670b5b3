"""Overlap metrics and shift sensitivity for dense label maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np


@dataclass
class SegMetrics:
    dice: List[float]
    precision: List[float]
    recall: List[float]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))

    @property
    def n_classes(self) -> int:
        return len(self.dice)


def confusion_counts(pred: np.ndarray, true: np.ndarray, n_classes: int) -> np.ndarray:
    """``[n_classes, 3]`` array of (TP, FP, FN) per class."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    true = np.asarray(true).reshape(-1).astype(np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction and ground truth sizes differ: {pred.size} vs {true.size}")
    joint = np.bincount(true * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(joint)
    fp = joint.sum(axis=0) - tp
    fn = joint.sum(axis=1) - tp
    return np.stack([tp, fp, fn], axis=1)


def _ratio(num, den, empty_pair: bool) -> float:
    if den == 0:
        return 1.0 if empty_pair else 0.0
    return float(num / den)


def metrics_from_counts(counts: np.ndarray) -> SegMetrics:
    dice, precision, recall = [], [], []
    for tp, fp, fn in counts:
        both_empty = tp + fp + fn == 0
        dice.append(_ratio(2 * tp, 2 * tp + fp + fn, both_empty))
        precision.append(_ratio(tp, tp + fp, both_empty))
        recall.append(_ratio(tp, tp + fn, both_empty))
    return SegMetrics(dice, precision, recall)


def seg_metrics(pred_labels, true_labels, n_classes: int) -> SegMetrics:
    """Per-class Dice, precision and recall pooled over all pixels.

    A class absent from both masks scores 1.0; absent from exactly one, 0.0.
    """
    return metrics_from_counts(confusion_counts(pred_labels, true_labels, n_classes))


@dataclass
class SensitivityReport:
    p_label_change: float
    mean_abs_change: float


def shift_image(image: np.ndarray, shift: int = 1) -> np.ndarray:
    """Translate ``image[C, *spatial]`` by ``+shift`` along every spatial axis,
    replicating the leading edge."""
    out = np.asarray(image)
    for axis in range(1, out.ndim):
        n = out.shape[axis]
        idx = np.clip(np.arange(n) - shift, 0, n - 1)
        out = np.take(out, idx, axis=axis)
    return out


def shift_sensitivity(model: Callable[[np.ndarray], np.ndarray], image: np.ndarray, shift: int = 1) -> SensitivityReport:
    """Per-pixel analogue of top-1 change and mean absolute change.

    ``model`` maps ``image[C, *spatial]`` to class probabilities
    ``[N, *spatial]``. Predictions on the original and the shifted image
    are compared on their overlap: the fraction of pixels whose argmax
    label changes, and the mean absolute change in the probability of the
    class originally predicted there.
    """
    image = np.asarray(image)
    if any(n < shift + 1 for n in image.shape[1:]):
        raise ValueError(f"image {image.shape[1:]} too small for a {shift}-pixel shift")
    p0 = np.asarray(model(image))
    p1 = np.asarray(model(shift_image(image, shift)))
    rank = image.ndim - 1
    a = p0[(slice(None),) + (slice(0, -shift),) * rank]
    b = p1[(slice(None),) + (slice(shift, None),) * rank]
    top0 = a.argmax(axis=0)
    top1 = b.argmax(axis=0)
    p_change = float(np.mean(top0 != top1))
    pa = np.take_along_axis(a, top0[None], axis=0)[0]
    pb = np.take_along_axis(b, top0[None], axis=0)[0]
    return SensitivityReport(p_change, float(np.mean(np.abs(pa - pb))))
