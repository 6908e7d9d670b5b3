"""A two-layer capsule network small enough for an exhaustive gradient check."""

from __future__ import annotations

import numpy as np

from . import capsules as caps
from .autodiff import functional as F
from .autodiff.gradcheck import GradcheckReport, gradcheck
from .autodiff.tensor import Tensor


def tiny_capsule_problem(seed: int = 0, size: int = 8, types=(2, 2), dim: int = 3, iterations: int = 3):
    """Input grid -> strided capsule conv -> capsule deconv, scored by a
    fixed random projection of the parents plus their lengths.

    Returns ``(loss_fn, params)`` for :func:`gradcheck`.
    """
    rng = np.random.default_rng(seed)
    t1, t2 = types
    grid = Tensor(rng.normal(0.0, 0.5, size=(1, size, size, 2, dim)), requires_grad=True)
    M1 = Tensor(rng.normal(0.0, 0.4, size=(3, 3, 2, dim, t1, dim)), requires_grad=True)
    M2 = Tensor(rng.normal(0.0, 0.4, size=(4, 4, t1, dim, t2, dim)), requires_grad=True)
    R = rng.normal(size=(1, size, size, t2, dim))
    W = rng.normal(size=(1, size, size, t2))

    def loss():
        h = caps.capsule_conv_nd(grid, caps.CapsuleLayerParams(M1, iterations=iterations, stride=2, padding=1))
        y = caps.capsule_deconv_nd(h, caps.CapsuleLayerParams(M2, iterations=iterations, stride=2, padding=1,
                                                              mode="deconv"))
        return F.sum(y * R) + F.sum(caps.capsule_lengths(y) * W)

    return loss, {"input": grid, "layer1.M": M1, "layer2.M": M2}


def tiny_capsule_gradcheck(seed: int = 0, tolerance: float = 1e-4, eps: float = 1e-6) -> GradcheckReport:
    loss, params = tiny_capsule_problem(seed)
    return gradcheck(loss, params, eps=eps, tolerance=tolerance)
