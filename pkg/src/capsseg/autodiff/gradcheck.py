"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_param: Dict[str, float] = field(default_factory=dict)
    checked: int = 0
    nonfinite: bool = False
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_error < self.tolerance

    def table(self) -> str:
        width = max([len(n) for n in self.per_param] + [9])
        lines = [f"{'parameter':<{width}}  max_rel_err"]
        for name, err in self.per_param.items():
            lines.append(f"{name:<{width}}  {err:.3e}")
        return "\n".join(lines)


def relative_error(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(1e-12, np.abs(a) + np.abs(n))


def gradcheck(f: Callable[[], Tensor], params: Union[Mapping[str, Tensor], Sequence[Tensor]],
              eps: float = 1e-5, tolerance: float = 1e-4, samples: Optional[int] = None,
              seed: int = 0) -> GradcheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads the parameter tensors, which are
    perturbed in place. The step is ``eps * max(1, |theta|)`` per element.
    ``samples`` limits the check to that many random elements per tensor.
    Non-finite values are reported (``nonfinite=True``), never raised.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(params, Mapping):
        params = {f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    report = GradcheckReport(max_rel_error=0.0, tolerance=tolerance)
    if not np.all(np.isfinite(loss.data)):
        report.nonfinite = True
        report.max_rel_error = np.inf
        return report
    backward(loss)
    rng = np.random.default_rng(seed)

    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            idx = np.sort(rng.choice(flat.size, size=samples, replace=False))
        worst = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                h = eps * max(1.0, abs(orig))
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    report.nonfinite = True
                    worst = np.inf
                    continue
                num = (fp - fm) / (2.0 * h)
                worst = max(worst, float(relative_error(analytic.reshape(-1)[i], num)))
        report.per_param[name] = worst
        report.checked += len(idx)
        report.max_rel_error = max(report.max_rel_error, worst)
    for p in params.values():
        p.grad = None
    return report
