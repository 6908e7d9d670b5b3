"""Command implementations behind the CLI. Each writes its artifacts under
an output directory and returns an in-memory result."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..architectures import (ModelParams, NetworkSpec, build_network, init_params, predict, ssl_pretrain)
from ..autodiff.gradcheck import GradcheckReport
from ..data.io import load_dataset, save_dataset
from ..data.rotate import AXES, rotate_array
from ..data.synth import Dataset, gen_blobs_3d, gen_shapes_2d
from ..data.transforms import KINDS, TransformKind, standard_transforms
from ..metrics import SegMetrics, SensitivityReport, confusion_counts, metrics_from_counts, shift_sensitivity
from ..training import (TrainResult, TrainState, background_baseline, deterministic_threads, fmt, kfold_split,
                        split_dataset, train_model)
from .checkpoint import (Checkpoint, check_manifest, load_checkpoint, optimizer_block,
                         restore_optimizer, save_checkpoint)
from .config import TrainConfig, config_hash, load_config

CHECKPOINT = "checkpoint.cpsc"
EXTRACTOR = "extractor.cpsc"
CONFIG = "config.txt"
ROBUSTNESS_HEADER = "axis,angle,dice_mean"
SENSITIVITY_HEADER = "sample,p_label_change,mean_abs_change"
EVAL_HEADER = "class,dice,precision,recall"


class UnsupportedModel(ValueError):
    pass


def _out(cfg: TrainConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _logger(path: Path, echo: bool) -> Callable[[str], None]:
    path.parent.mkdir(parents=True, exist_ok=True)

    def log(msg: str) -> None:
        with open(path, "a", encoding="utf-8") as f:
            f.write(msg + "\n")
        if echo:
            print(msg, flush=True)

    return log


def _load(path: str, what: str, n_classes: int = 0) -> Dataset:
    if not path:
        raise ValueError(f"no {what} path given")
    try:
        return load_dataset(path, n_classes or None)
    except FileNotFoundError as e:
        raise FileNotFoundError(f"{what} {path}: {e}") from e


def build_spec(cfg: TrainConfig, ds: Dataset) -> NetworkSpec:
    sample = ds.samples[0]
    n = cfg.n_classes or ds.n_classes
    if ds.n_classes > n:
        raise ValueError(f"dataset has {ds.n_classes} classes, config {n}")
    return build_network(cfg.arch, sample.mask.shape, n, toy=cfg.toy, in_channels=sample.image.shape[0],
                         iterations=cfg.routing_iterations)


def _with_classes(ds: Dataset, n: int) -> Dataset:
    return ds if ds.n_classes == n else Dataset(ds.samples, n, ds.names)


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(kind: str, out: str, seed: int, count: int, size: int, n_classes: int = 2,
                 channels: int = 1) -> Dataset:
    if kind == "shapes2d":
        ds = gen_shapes_2d(seed, count, size, n_classes, channels)
    elif kind == "blobs3d":
        ds = gen_blobs_3d(seed, count, size, n_classes, channels)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    save_dataset(out, ds)
    return ds


# ---------------------------------------------------------------- train / pretrain


def _write_config(cfg: TrainConfig, out: Path) -> None:
    (out / CONFIG).write_text(cfg.to_text(), encoding="utf-8")


def _params_for(cfg: TrainConfig, spec: NetworkSpec) -> ModelParams:
    params = init_params(spec, cfg.seed)
    if cfg.pretrained:
        ck = load_checkpoint(cfg.pretrained)
        want = {k: t.shape for k, t in params.subset(spec.extractor).items()}
        check_manifest(ck.params, want)
        for k, a in ck.params.items():
            params.tensors[k].data = np.array(a, dtype=np.float64)
    return params


@dataclass
class TrainRun:
    spec: NetworkSpec
    result: TrainResult
    checkpoint: Path
    metrics_csv: Path
    baseline: SegMetrics


def cmd_train(cfg: TrainConfig, resume: Optional[str] = None, echo: bool = False) -> TrainRun:
    """Train (or resume) and write ``metrics.csv``, ``checkpoint.cpsc``,
    ``config.txt`` and ``train.log`` under ``cfg.out``."""
    out = _out(cfg)
    log = _logger(out / "train.log", echo)
    log("resolved config:\n" + cfg.to_text().rstrip())
    _write_config(cfg, out)
    full = _load(cfg.dataset, "dataset", cfg.n_classes)
    if cfg.val_dataset:
        train_set, val_set = full, _load(cfg.val_dataset, "validation dataset", cfg.n_classes)
    elif cfg.folds:
        train_set, val_set = kfold_split(full, cfg.seed, cfg.folds, cfg.fold)
    else:
        train_set, val_set = split_dataset(full, cfg.seed)
    spec = build_spec(cfg, full)
    n = spec.n_classes
    train_set, val_set = _with_classes(train_set, n), _with_classes(val_set, n)
    params = _params_for(cfg, spec)
    state = None
    if resume:
        ck = load_checkpoint(resume, expect_hash=config_hash(cfg))
        check_manifest(ck.params, dict(params.manifest()))
        params.load_arrays(ck.params)
        opt = restore_optimizer(ck.optimizer, {k: t.shape for k, t in params.tensors.items()})
        state = TrainState(params, opt)
        state.restore_accumulators(ck.optimizer)
        log(f"resumed from {resume} at iteration {state.iteration}")
    result = train_model(spec, params, train_set, val_set, cfg, state=state, csv_path=out / "metrics.csv",
                         diagnostic_path=out / "diagnostic.json", log=log)
    st = result.state
    ck = Checkpoint(st.params.arrays(), optimizer_block(st.opt, st.accumulators()), config_hash(cfg))
    save_checkpoint(out / CHECKPOINT, ck)
    base = background_baseline(val_set)
    log(f"stopped: {result.stop_reason} at iteration {st.iteration}; "
        f"background baseline dice {fmt(base.mean_dice)}")
    return TrainRun(spec, result, out / CHECKPOINT, out / "metrics.csv", base)


def parse_transforms(text: str, channels: int) -> List[TransformKind]:
    if text.strip() in ("", "all"):
        return standard_transforms(channels)
    wanted = [t.strip() for t in text.split(",") if t.strip()]
    for w in wanted:
        if w not in KINDS:
            raise ValueError(f"unknown transform {w!r}")
    return [t for t in standard_transforms(channels) if t.kind in wanted]


def cmd_pretrain(cfg: TrainConfig, transforms: str = "all", echo: bool = False) -> Dict[str, object]:
    """Pretext training of the feature extractor; writes ``pretrain.csv``
    (interval means of the pretext loss) and ``extractor.cpsc``."""
    out = _out(cfg)
    log = _logger(out / "pretrain.log", echo)
    log("resolved config:\n" + cfg.to_text().rstrip())
    _write_config(cfg, out)
    ds = _load(cfg.dataset, "dataset", cfg.n_classes)
    spec = build_spec(cfg, ds)
    params = init_params(spec, cfg.seed)
    ts = parse_transforms(transforms, ds.samples[0].image.shape[0])
    images = np.stack([s.image for s in ds.samples])
    with deterministic_threads(cfg.deterministic):
        res = ssl_pretrain(spec, params, images, ts, cfg.ssl_steps, cfg.seed, lr=cfg.ssl_lr,
                           batch_size=cfg.batch_size)
    rows = ["iter,split,loss_pretext"]
    k = cfg.ssl_log_interval
    for end in range(k, len(res.losses) + 1, k):
        rows.append(f"{end},pretrain,{fmt(np.mean(res.losses[end - k:end]))}")
    (out / "pretrain.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    ext = res.params.subset(spec.extractor)
    block = optimizer_block(res.optimizer) if res.optimizer is not None else {}
    save_checkpoint(out / EXTRACTOR, Checkpoint({k2: t.data for k2, t in ext.items()}, block, config_hash(cfg)))
    log(f"pretext loss first {fmt(res.losses[0]) if res.losses else 'n/a'} last "
        f"{fmt(res.losses[-1]) if res.losses else 'n/a'}")
    return {"spec": spec, "losses": res.losses, "checkpoint": out / EXTRACTOR, "csv": out / "pretrain.csv"}


# ---------------------------------------------------------------- evaluation drivers


def load_model(checkpoint: str, cfg: TrainConfig, ds: Dataset, verify_hash: bool = True):
    spec = build_spec(cfg, ds)
    params = init_params(spec, cfg.seed)
    ck = load_checkpoint(checkpoint, expect_hash=config_hash(cfg) if verify_hash else None)
    check_manifest(ck.params, dict(params.manifest()))
    params.load_arrays(ck.params)
    return spec, params


def config_for_checkpoint(checkpoint: str, config: Optional[str] = None, overrides=None) -> TrainConfig:
    """The config a checkpoint was trained with: ``config`` if given, else
    ``config.txt`` beside the checkpoint."""
    path = config or str(Path(checkpoint).parent / CONFIG)
    return load_config(path if Path(path).exists() else None, overrides)


def eval_rows(m: SegMetrics) -> List[str]:
    rows = [EVAL_HEADER]
    for c in range(m.n_classes):
        rows.append(f"{c},{fmt(m.dice[c])},{fmt(m.precision[c])},{fmt(m.recall[c])}")
    rows.append(f"mean,{fmt(m.mean_dice)},{fmt(np.mean(m.precision))},{fmt(np.mean(m.recall))}")
    return rows


def cmd_eval(checkpoint: str, dataset: str, cfg: TrainConfig, out: Optional[str] = None) -> SegMetrics:
    ds = _load(dataset, "dataset", cfg.n_classes)
    spec, params = load_model(checkpoint, cfg, ds)
    ds = _with_classes(ds, spec.n_classes)
    with deterministic_threads(cfg.deterministic):
        labels, _ = predict(spec, params, ds.images())
    m = metrics_from_counts(confusion_counts(labels, ds.masks(), spec.n_classes))
    dest = Path(out or cfg.out)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "eval.csv").write_text("\n".join(eval_rows(m)) + "\n", encoding="utf-8")
    return m


def robustness_rows(spec: NetworkSpec, params: ModelParams, ds: Dataset, angles: Sequence[float],
                    axes: Sequence[str]) -> List[str]:
    """For every (axis, angle): rotate the inputs, predict, rotate the
    prediction back and score it against the original masks."""
    if spec.rank != 3:
        raise UnsupportedModel("rotation robustness needs a 3D model")
    for a in axes:
        if a not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {a!r}")
    images, masks = ds.images(), ds.masks()
    rows = [ROBUSTNESS_HEADER]
    for axis in axes:
        for angle in angles:
            rot = np.stack([np.stack([rotate_array(ch, angle, axis) for ch in img]) for img in images])
            labels, _ = predict(spec, params, rot)
            back = np.stack([rotate_array(l, angle, axis, labels=True, inverse=True) for l in labels])
            m = metrics_from_counts(confusion_counts(back, masks, spec.n_classes))
            rows.append(f"{axis},{format_angle(angle)},{fmt(m.mean_dice)}")
    return rows


def format_angle(a: float) -> str:
    return str(int(a)) if float(a).is_integer() else fmt(a)


def cmd_robustness(checkpoint: str, dataset: str, cfg: TrainConfig, angles: Sequence[float],
                   axes: Sequence[str], out: Optional[str] = None) -> List[str]:
    ds = _load(dataset, "dataset", cfg.n_classes)
    spec, params = load_model(checkpoint, cfg, ds)
    ds = _with_classes(ds, spec.n_classes)
    with deterministic_threads(cfg.deterministic):
        rows = robustness_rows(spec, params, ds, angles, axes)
    dest = Path(out or cfg.out)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "robustness.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return rows


def sensitivity_rows(model: Callable[[np.ndarray], np.ndarray], ds: Dataset, shift: int = 1) -> List[str]:
    """Per-sample shift sensitivity, then a ``mean`` row."""
    rows = [SENSITIVITY_HEADER]
    reports: List[SensitivityReport] = []
    for name, s in zip(ds.names, ds.samples):
        r = shift_sensitivity(model, s.image, shift)
        reports.append(r)
        rows.append(f"{name},{fmt(r.p_label_change)},{fmt(r.mean_abs_change)}")
    if reports:
        rows.append(f"mean,{fmt(np.mean([r.p_label_change for r in reports]))},"
                    f"{fmt(np.mean([r.mean_abs_change for r in reports]))}")
    return rows


def cmd_sensitivity(checkpoint: str, dataset: str, cfg: TrainConfig, out: Optional[str] = None) -> List[str]:
    ds = _load(dataset, "dataset", cfg.n_classes)
    spec, params = load_model(checkpoint, cfg, ds)

    def model(image):
        return predict(spec, params, image[None])[1][0]

    with deterministic_threads(cfg.deterministic):
        rows = sensitivity_rows(model, ds)
    dest = Path(out or cfg.out)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "sensitivity.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return rows


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(seed: int = 0, out: Optional[str] = None, tolerance: float = 1e-4) -> GradcheckReport:
    from ..gradcheck_net import tiny_capsule_gradcheck

    report = tiny_capsule_gradcheck(seed, tolerance=tolerance)
    if out:
        dest = Path(out)
        dest.mkdir(parents=True, exist_ok=True)
        lines = ["param,max_rel_error"] + [f"{k},{fmt(v)}" for k, v in report.per_param.items()]
        (dest / "gradcheck.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return report
