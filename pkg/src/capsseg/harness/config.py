"""Training configuration: defaults, ``key = value`` files and flag overrides."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Optional


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "segcaps2d"
    dataset: str = ""
    val_dataset: str = ""  # empty: seeded 80/20 split of ``dataset``
    folds: int = 0  # >= 2: cross-validation, ``fold`` picks the held-out part
    fold: int = 0
    out: str = "run"
    pretrained: str = ""  # extractor checkpoint from ``pretrain``
    seed: int = 0
    deterministic: bool = True
    toy: bool = True
    n_classes: int = 0  # 0: taken from the dataset
    batch_size: int = 2
    max_iterations: int = 5000
    lr: float = 1e-4
    lr_decay: float = 0.05
    patience: int = 500
    early_stop: int = 5000
    eval_interval: int = 100
    routing_iterations: int = 3
    gamma: float = 0.001
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    class_weighting: bool = True
    ssl_steps: int = 500
    ssl_lr: float = 1e-4
    ssl_log_interval: int = 50

    def __post_init__(self):
        positive = ("batch_size", "lr", "patience", "early_stop", "eval_interval", "routing_iterations",
                    "ssl_lr", "ssl_log_interval")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("max_iterations", "ssl_steps", "n_classes", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.folds == 1 or self.folds < 0 or not 0 <= self.fold < max(self.folds, 1):
            raise ConfigError(f"fold {self.fold} of {self.folds} folds is not a valid choice")
        if self.arch not in ("segcaps2d", "ucaps3d"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if not 0.0 <= self.m_minus < self.m_plus <= 1.0:
            raise ConfigError("margins need 0 <= m_minus < m_plus <= 1")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


# fields that may change between a run and its resumption
VOLATILE = ("max_iterations", "out", "dataset", "val_dataset", "pretrained", "ssl_log_interval")


def config_hash(cfg: TrainConfig) -> bytes:
    """First 8 bytes of SHA-256 over the canonical text of the fields that
    shape the trajectory."""
    text = "".join(f"{f.name}={format_value(getattr(cfg, f.name))}\n" for f in fields(cfg)
                   if f.name not in VOLATILE)
    return hashlib.sha256(text.encode("utf-8")).digest()[:8]


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TRUE = ("true", "1", "yes", "on")
_FALSE = ("false", "0", "no", "off")


def _field_types() -> Dict[str, type]:
    return {f.name: type(f.default) for f in fields(TrainConfig)}


def parse_value(key: str, raw: str, where: str = ""):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"{where}unknown config key {key!r}")
    kind = types[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}key {key!r}: expected {kind.__name__}, got {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, object]:
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (p.strip() for p in body.split("=", 1))
        values[key] = parse_value(key, raw, f"{source}:{lineno}: ")
    return values


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, object]] = None) -> TrainConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed
    or raw strings)."""
    values: Dict[str, object] = {}
    if path:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e.strerror}") from e
        values.update(parse_config_text(text, str(p)))
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        values[key] = parse_value(key, v, "flag: ") if isinstance(v, str) else v
        if key not in _field_types():
            raise ConfigError(f"unknown config key {key!r}")
    return TrainConfig(**values)
