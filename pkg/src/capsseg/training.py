"""Supervised training loop with plateau decay, early stopping and resumable state.

The batch drawn at iteration ``t`` depends only on (seed, t): each epoch is a
seeded permutation of the training set. Together with the interval
accumulators kept in :class:`TrainState`, this makes a run resumed from any
saved iteration continue exactly as the uninterrupted run would.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .architectures import LossConfig, ModelParams, NetworkSpec, predict_labels, segmentation_loss
from .autodiff.optim import OptimizerState, adam_step, plateau_update
from .autodiff.tensor import backward, no_grad
from .data.synth import Dataset
from .metrics import SegMetrics, confusion_counts, metrics_from_counts

CSV_HEADER = "iter,split,loss_total,loss_margin,loss_ce,loss_recon,dice_mean"
LOSS_KEYS = ("loss_total", "loss_margin", "loss_ce", "loss_recon")


class TrainingDiverged(FloatingPointError):
    pass


def fmt(x: float) -> str:
    """Round-trippable float text."""
    return format(float(x), ".17g")


@contextlib.contextmanager
def deterministic_threads(enabled: bool = True):
    """Pin BLAS pools to one thread so reductions keep a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Sample indices for ``iteration``: consecutive slots of per-epoch
    seeded permutations."""
    if n < 1:
        raise ValueError("empty training set")
    out = []
    perms: Dict[int, np.ndarray] = {}
    for q in range(iteration * batch_size, (iteration + 1) * batch_size):
        epoch, pos = divmod(q, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(perms[epoch][pos])
    return np.array(out, dtype=np.int64)


def split_dataset(ds: Dataset, seed: int, val_fraction: float = 0.2):
    """Seeded shuffle, then the last ``val_fraction`` becomes validation."""
    perm = np.random.default_rng([seed, 0xDA7A]).permutation(len(ds))
    n_val = max(1, int(round(len(ds) * val_fraction)))
    if n_val >= len(ds):
        raise ValueError("dataset too small to split")
    return ds.subset(sorted(perm[:-n_val].tolist())), ds.subset(sorted(perm[-n_val:].tolist()))


def kfold_split(ds: Dataset, seed: int, folds: int, fold: int):
    """Fold ``fold`` of a seeded ``folds``-way partition is validation; the rest trains."""
    if folds < 2 or not 0 <= fold < folds:
        raise ValueError(f"need folds >= 2 and 0 <= fold < folds, got fold {fold} of {folds}")
    if len(ds) < folds:
        raise ValueError(f"{len(ds)} samples cannot fill {folds} folds")
    perm = np.random.default_rng([seed, 0xF01D]).permutation(len(ds))
    parts = np.array_split(perm, folds)
    val = sorted(parts[fold].tolist())
    train = sorted(np.concatenate([q for i, q in enumerate(parts) if i != fold]).tolist())
    return ds.subset(train), ds.subset(val)


def loss_config(cfg) -> LossConfig:
    return LossConfig(cfg.gamma, cfg.m_plus, cfg.m_minus, cfg.lam, cfg.class_weighting)


@dataclass
class TrainState:
    params: ModelParams
    opt: OptimizerState
    iteration: int = 0
    acc_loss: np.ndarray = field(default_factory=lambda: np.zeros(len(LOSS_KEYS)))
    acc_batches: int = 0
    acc_counts: Optional[np.ndarray] = None

    def accumulators(self) -> Dict[str, np.ndarray]:
        out = {"iteration": np.array(float(self.iteration)), "acc/loss": self.acc_loss.copy(),
               "acc/batches": np.array(float(self.acc_batches))}
        if self.acc_counts is not None:
            out["acc/counts"] = self.acc_counts.astype(np.float64)
        return out

    def restore_accumulators(self, block: Dict[str, np.ndarray]) -> None:
        self.iteration = int(block["iteration"])
        self.acc_loss = np.array(block["acc/loss"], dtype=np.float64)
        self.acc_batches = int(block["acc/batches"])
        counts = block.get("acc/counts")
        self.acc_counts = None if counts is None else np.array(counts).astype(np.int64)


@dataclass
class EvalResult:
    losses: Dict[str, float]
    metrics: SegMetrics


def evaluate(spec: NetworkSpec, params: ModelParams, ds: Dataset, lcfg: LossConfig,
             batch_size: int = 4) -> EvalResult:
    """Validation losses (batch-size weighted mean) and pooled metrics."""
    sums = np.zeros(len(LOSS_KEYS))
    counts = np.zeros((spec.n_classes, 3), dtype=np.int64)
    with no_grad():
        for i in range(0, len(ds), batch_size):
            sub = ds.samples[i:i + batch_size]
            x = np.stack([s.image for s in sub]).astype(np.float64)
            y = np.stack([s.mask for s in sub])
            parts, out = segmentation_loss(spec, params, x, y, lcfg, train=False, return_output=True)
            vals = parts.values()
            sums += len(sub) * np.array([vals[k] for k in LOSS_KEYS])
            counts += confusion_counts(predict_labels(spec, out), y, spec.n_classes)
    losses = dict(zip(LOSS_KEYS, (sums / max(len(ds), 1)).tolist()))
    return EvalResult(losses, metrics_from_counts(counts))


def background_baseline(ds: Dataset) -> SegMetrics:
    """Metrics of predicting background everywhere."""
    masks = ds.masks()
    return metrics_from_counts(confusion_counts(np.zeros_like(masks), masks, ds.n_classes))


@dataclass
class TrainResult:
    state: TrainState
    rows: List[str]
    stop_reason: str
    last_eval: Optional[EvalResult] = None


def _dump_diagnostic(path: Optional[Path], state: TrainState, idx, err: Exception, extra: dict) -> None:
    if path is None:
        return
    info = {
        "iteration": state.iteration,
        "error": str(err),
        "batch": [int(i) for i in idx],
        "lr": state.opt.lr,
        "param_norms": {k: float(np.linalg.norm(t.data)) for k, t in state.params.tensors.items()},
        "param_finite": {k: bool(np.all(np.isfinite(t.data))) for k, t in state.params.tensors.items()},
    }
    info.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(info, indent=2, sort_keys=True), encoding="utf-8")


def train_model(spec: NetworkSpec, init: ModelParams, train_set: Dataset, val_set: Dataset, cfg,
                state: Optional[TrainState] = None, csv_path: Optional[Path] = None,
                diagnostic_path: Optional[Path] = None,
                log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Optimise the summed segmentation loss with Adam.

    Every ``eval_interval`` iterations a ``train`` row (interval means) and
    an ``eval`` row (validation) are emitted; the validation mean Dice
    drives the plateau decay (``lr *= lr_decay`` after ``patience``
    iterations without improvement) and early stopping (``early_stop``
    iterations without improvement). ``max_iterations`` bounds the run.
    """
    if train_set.n_classes != spec.n_classes or val_set.n_classes != spec.n_classes:
        raise ValueError(f"dataset has {train_set.n_classes} classes, network {spec.n_classes}")
    if state is None:
        params = init.copy()
        state = TrainState(params, OptimizerState.for_params(params.tensors, lr=cfg.lr))
    if state.acc_counts is None:
        state.acc_counts = np.zeros((spec.n_classes, 3), dtype=np.int64)
    lcfg = loss_config(cfg)
    rows: List[str] = []
    csv_file = None
    if csv_path is not None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        fresh = state.iteration == 0 or not csv_path.exists()
        csv_file = open(csv_path, "w" if fresh else "a", encoding="utf-8", newline="\n")
        if fresh:
            csv_file.write(CSV_HEADER + "\n")
    images = np.stack([s.image for s in train_set.samples]).astype(np.float64)
    masks = np.stack([s.mask for s in train_set.samples])
    tensors = state.params.tensors
    stop_reason = "max_iterations"
    last_eval = None
    try:
        with deterministic_threads(cfg.deterministic):
            while state.iteration < cfg.max_iterations:
                if state.opt.since_improvement >= cfg.early_stop:
                    stop_reason = "early_stop"
                    break
                idx = batch_indices(len(train_set), cfg.batch_size, cfg.seed, state.iteration)
                for t in tensors.values():
                    t.grad = None
                try:
                    parts, out = segmentation_loss(spec, state.params, images[idx], masks[idx], lcfg,
                                                   train=True, return_output=True)
                except FloatingPointError as e:
                    _dump_diagnostic(diagnostic_path, state, idx, e, {})
                    raise TrainingDiverged(f"iteration {state.iteration}: {e}") from e
                backward(parts.total)
                grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()}
                bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
                if bad:
                    err = FloatingPointError(f"non-finite gradient in {', '.join(bad)}")
                    _dump_diagnostic(diagnostic_path, state, idx, err, parts.values())
                    raise TrainingDiverged(f"iteration {state.iteration}: {err}")
                adam_step(state.opt, tensors, grads)
                state.iteration += 1
                vals = parts.values()
                state.acc_loss += np.array([vals[k] for k in LOSS_KEYS])
                state.acc_batches += 1
                state.acc_counts += confusion_counts(predict_labels(spec, out), masks[idx], spec.n_classes)
                if state.iteration % cfg.eval_interval == 0:
                    tr = state.acc_loss / max(state.acc_batches, 1)
                    tr_dice = metrics_from_counts(state.acc_counts).mean_dice
                    new = [",".join([str(state.iteration), "train"] + [fmt(v) for v in tr] + [fmt(tr_dice)])]
                    last_eval = evaluate(spec, state.params, val_set, lcfg, batch_size=max(cfg.batch_size, 4))
                    ev = last_eval.losses
                    new.append(",".join([str(state.iteration), "eval"] + [fmt(ev[k]) for k in LOSS_KEYS]
                                        + [fmt(last_eval.metrics.mean_dice)]))
                    decayed = plateau_update(state.opt, last_eval.metrics.mean_dice, cfg.eval_interval,
                                             cfg.patience, cfg.lr_decay)
                    state.acc_loss = np.zeros(len(LOSS_KEYS))
                    state.acc_batches = 0
                    state.acc_counts = np.zeros((spec.n_classes, 3), dtype=np.int64)
                    rows += new
                    if csv_file is not None:
                        csv_file.write("\n".join(new) + "\n")
                        csv_file.flush()
                    if log is not None:
                        log(f"iter {state.iteration} train_loss {fmt(tr[0])} val_dice "
                            f"{last_eval.metrics.mean_dice:.4f} lr {state.opt.lr:.3g}" + (" (decayed)" if decayed else ""))
            else:
                if state.opt.since_improvement >= cfg.early_stop:
                    stop_reason = "early_stop"
    finally:
        if csv_file is not None:
            csv_file.close()
    return TrainResult(state, rows, stop_reason, last_eval)
