"""Volume rotation about the x, y, z axes (or all three) for robustness runs.

Spatial axes 0, 1, 2 of a volume are x, y, z. Rotation is about the volume
centre; intensities use trilinear interpolation, labels nearest
neighbour, and samples falling outside the volume read 0.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.ndimage import affine_transform

from .synth import SegSample

STANDARD_ANGLES = (0, 15, 30, 45, 60, 75, 90)
AXES = ("x", "y", "z", "all")


class NonStandardAngleWarning(UserWarning):
    pass


def _axis_matrix(axis: str, angle_deg: float) -> np.ndarray:
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    # exact zeros/ones at right angles keep 90-degree turns a pure permutation
    c, s = (0.0 if abs(v) < 1e-12 else v for v in (c, s))
    c, s = (float(np.sign(v)) if abs(abs(v) - 1.0) < 1e-12 else v for v in (c, s))
    i, j = {"x": (1, 2), "y": (2, 0), "z": (0, 1)}[axis]
    R = np.eye(3)
    R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
    return R


def rotation_matrix(angle_deg: float, axis: str) -> np.ndarray:
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    if axis != "all":
        return _axis_matrix(axis, angle_deg)
    return _axis_matrix("z", angle_deg) @ _axis_matrix("y", angle_deg) @ _axis_matrix("x", angle_deg)


def _resample(vol: np.ndarray, R: np.ndarray, order: int) -> np.ndarray:
    center = (np.array(vol.shape, dtype=np.float64) - 1.0) / 2.0
    inv = R.T
    offset = center - inv @ center
    return affine_transform(vol, inv, offset=offset, order=order, mode="constant", cval=0.0)


def rotate_array(vol: np.ndarray, angle: float, axis: str, labels: bool = False, inverse: bool = False) -> np.ndarray:
    """Rotate a single 3D array; ``inverse`` applies the opposite rotation."""
    if vol.ndim != 3:
        raise ValueError(f"rotation needs a 3D volume, got shape {vol.shape}")
    if angle == 0:
        return vol.copy()
    R = rotation_matrix(angle, axis)
    if inverse:
        R = R.T
    if labels:
        return _resample(vol, R, order=0).astype(vol.dtype)
    return _resample(vol.astype(np.float64), R, order=1).astype(vol.dtype)


def rotate_volume(sample: SegSample, angle: float, axis: str, inverse: bool = False) -> SegSample:
    """Rotate image (trilinear) and mask (nearest) together."""
    if sample.rank != 3:
        raise ValueError("rotate_volume needs a 3D sample")
    if angle not in STANDARD_ANGLES:
        warnings.warn(f"non-standard rotation angle {angle}", NonStandardAngleWarning, stacklevel=2)
    image = np.stack([rotate_array(ch, angle, axis, inverse=inverse) for ch in sample.image])
    mask = rotate_array(sample.mask, angle, axis, labels=True, inverse=inverse)
    return SegSample(image, mask)
