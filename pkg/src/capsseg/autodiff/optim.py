"""Adam with plateau-based learning-rate decay bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import DTYPE, ContractError, Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    # plateau decay bookkeeping
    best_metric: float = -np.inf
    since_improvement: int = 0
    decay_wait: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **kwargs) -> "OptimizerState":
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros(p.shape, dtype=DTYPE)
            state.v[name] = np.zeros(p.shape, dtype=DTYPE)
        return state


def adam_step(state: OptimizerState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise ContractError(f"no gradient for parameters: {', '.join(missing)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros(p.shape, dtype=DTYPE))
        v = state.v.setdefault(name, np.zeros(p.shape, dtype=DTYPE))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def plateau_update(state: OptimizerState, metric: float, interval: int, patience: int, factor: float) -> bool:
    """Track a validation metric; multiply lr by ``factor`` after ``patience``
    iterations without improvement. Returns True when the lr was decayed.

    ``since_improvement`` keeps counting across decays (early stopping
    reads it); ``decay_wait`` restarts after each decay.
    """
    if metric > state.best_metric:
        state.best_metric = metric
        state.since_improvement = 0
        state.decay_wait = 0
        return False
    state.since_improvement += interval
    state.decay_wait += interval
    if state.decay_wait >= patience:
        state.lr *= factor
        state.decay_wait = 0
        return True
    return False
