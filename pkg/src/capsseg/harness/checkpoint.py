"""Checkpoint files.

Layout (little-endian): magic ``CPSC``, u32 version, u32 entry count, the
parameter entries, then an optimizer block (u32 count and entries in the
same encoding), then the 8-byte config hash. An entry is u16 name length,
UTF-8 name, u8 dtype code, u8 rank, u32 extents and row-major data.
Parameters are stored as float64 (dtype code 2).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from ..autodiff.optim import OptimizerState
from ..autodiff.tensor import ShapeError
from ..data.io import FormatError, Reader, encode_array

MAGIC = b"CPSC"
VERSION = 1
HASH_BYTES = 8
OPT_SCALARS = ("step", "lr", "beta1", "beta2", "eps", "best_metric", "since_improvement", "decay_wait")


class ManifestMismatch(ShapeError):
    def __init__(self, differences: List[str]):
        super().__init__("checkpoint does not match the model: " + "; ".join(differences))
        self.differences = differences


class ConfigMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    config_hash: bytes = b"\0" * HASH_BYTES

    @property
    def iteration(self) -> int:
        it = self.optimizer.get("iteration")
        return int(it) if it is not None else 0


def _entries(arrays: Dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype(np.float64)
        out.append(struct.pack("<H", len(raw)) + raw + encode_array(arr))
    return b"".join(out)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    if len(ck.config_hash) != HASH_BYTES:
        raise ValueError("config hash must be 8 bytes")
    return MAGIC + struct.pack("<I", VERSION) + _entries(ck.params) + _entries(ck.optimizer) + ck.config_hash


def _read_entries(r: Reader) -> Dict[str, np.ndarray]:
    (count,) = r.unpack("<I", "entry count")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.pos
        (n,) = r.unpack("<H", "name length")
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            r.fail("entry name is not UTF-8", at)
        if name in out:
            r.fail(f"duplicate entry {name!r}", at)
        out[name] = r.array()
    return out


def decode_checkpoint(buf: bytes, path=None) -> Checkpoint:
    r = Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        r.fail("bad magic, expected CPSC", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        r.fail(f"unsupported checkpoint version {version}", 4)
    params = _read_entries(r)
    optimizer = _read_entries(r)
    h = r.take(HASH_BYTES, "config hash")
    r.done()
    return Checkpoint(params, optimizer, h)


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(encode_checkpoint(ck))
        tmp.replace(path)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e.strerror}") from e


def load_checkpoint(path, expect_hash: Optional[bytes] = None) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e.strerror}") from e
    ck = decode_checkpoint(buf, path)
    if expect_hash is not None and ck.config_hash != expect_hash:
        raise ConfigMismatch(f"{path}: config hash {ck.config_hash.hex()} differs from {expect_hash.hex()}")
    return ck


def manifest_diff(stored: Dict[str, np.ndarray], expected: Dict[str, tuple]) -> List[str]:
    diff = []
    for name, shape in expected.items():
        if name not in stored:
            diff.append(f"missing {name} {tuple(shape)}")
        elif tuple(stored[name].shape) != tuple(shape):
            diff.append(f"{name}: stored {tuple(stored[name].shape)}, model {tuple(shape)}")
    diff += [f"unexpected {name}" for name in stored if name not in expected]
    return diff


def check_manifest(stored: Dict[str, np.ndarray], expected: Dict[str, tuple]) -> None:
    diff = manifest_diff(stored, expected)
    if diff:
        raise ManifestMismatch(diff)


def optimizer_block(state: OptimizerState, extra: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for k in OPT_SCALARS:
        out[k] = np.array(float(getattr(state, k)))
    for name, m in state.m.items():
        out[f"m/{name}"] = m
    for name, v in state.v.items():
        out[f"v/{name}"] = v
    out.update(extra or {})
    return out


def restore_optimizer(block: Dict[str, np.ndarray], expected: Dict[str, tuple]) -> OptimizerState:
    missing = [k for k in OPT_SCALARS if k not in block]
    if missing:
        raise ManifestMismatch([f"optimizer block lacks {k}" for k in missing])
    m = {k[2:]: np.array(v) for k, v in block.items() if k.startswith("m/")}
    v = {k[2:]: np.array(a) for k, a in block.items() if k.startswith("v/")}
    check_manifest(m, expected)
    check_manifest(v, expected)
    state = OptimizerState(m=m, v=v)
    for k in OPT_SCALARS:
        val = float(block[k])
        setattr(state, k, int(val) if k in ("step", "since_improvement", "decay_wait") else val)
    return state
