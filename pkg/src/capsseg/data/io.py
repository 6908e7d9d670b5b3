"""Volume files and dataset directories.

Volume layout (all integers little-endian): magic ``CPSV``, u32 version,
u8 dtype code, u8 rank, u32 extents, then row-major element data. A
dataset directory holds ``manifest.txt`` with one ``image<TAB>mask`` pair
of relative paths per line.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .synth import Dataset, SegSample

VOLUME_MAGIC = b"CPSV"
VOLUME_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
VOLUME_DTYPES = (0, 1)
MAX_RANK = 8
MANIFEST = "manifest.txt"

PathLike = Union[str, Path]


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int, path: Optional[PathLike] = None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


def dtype_code(arr: np.ndarray, allowed=tuple(DTYPE_CODES)) -> int:
    for code in allowed:
        if DTYPE_CODES[code] == arr.dtype.newbyteorder("<") or DTYPE_CODES[code] == arr.dtype:
            return code
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode_array(arr: np.ndarray, allowed=tuple(DTYPE_CODES)) -> bytes:
    """``dtype u8, rank u8, extents u32 x rank, data``."""
    code = dtype_code(arr, allowed)
    if arr.ndim > 255:
        raise ValueError("rank too large")
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


class Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, buf: bytes, path: Optional[PathLike] = None):
        self.buf = buf
        self.pos = 0
        self.path = path

    def fail(self, message: str, offset: Optional[int] = None):
        raise FormatError(message, self.pos if offset is None else offset, self.path)

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            self.fail(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, allowed=tuple(DTYPE_CODES), max_rank: int = MAX_RANK) -> np.ndarray:
        start = self.pos
        code, rank = self.unpack("<BB", "array header")
        if code not in allowed:
            self.fail(f"unknown dtype code {code}", start)
        if rank > max_rank:
            self.fail(f"rank {rank} exceeds {max_rank}", start + 1)
        dims_at = self.pos
        dims = self.unpack(f"<{rank}I", "extents")
        dtype = DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if count * dtype.itemsize > len(self.buf) - self.pos:
            self.fail(f"extents {dims} exceed the remaining {len(self.buf) - self.pos} bytes", dims_at)
        data = self.take(count * dtype.itemsize, "array data")
        return np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))

    def done(self):
        if self.pos != len(self.buf):
            self.fail(f"{len(self.buf) - self.pos} trailing bytes")


def encode_volume(arr: np.ndarray) -> bytes:
    return VOLUME_MAGIC + struct.pack("<I", VOLUME_VERSION) + encode_array(arr, VOLUME_DTYPES)


def decode_volume(buf: bytes, path: Optional[PathLike] = None) -> np.ndarray:
    r = Reader(buf, path)
    if r.take(4, "magic") != VOLUME_MAGIC:
        r.fail("bad magic, expected CPSV", 0)
    (version,) = r.unpack("<I", "version")
    if version != VOLUME_VERSION:
        r.fail(f"unsupported version {version}", 4)
    arr = r.array(VOLUME_DTYPES)
    r.done()
    return arr


def write_volume(path: PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_volume(arr))


def read_volume(path: PathLike) -> np.ndarray:
    return decode_volume(Path(path).read_bytes(), path)


def save_dataset(root: PathLike, dataset: Dataset) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(dataset.samples):
        img, msk = f"images/{i:05d}.cpsv", f"masks/{i:05d}.cpsv"
        write_volume(root / img, np.asarray(s.image, dtype=np.float32))
        write_volume(root / msk, np.asarray(s.mask, dtype=np.uint8))
        lines.append(f"{img}\t{msk}\n")
    (root / MANIFEST).write_text("".join(lines), encoding="utf-8")


def load_dataset(root: PathLike, n_classes: Optional[int] = None) -> Dataset:
    """Load samples in manifest order. Without ``n_classes`` the class count
    is the largest label + 1 (at least 2)."""
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    samples, names = [], []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{manifest}:{lineno}: expected 'image<TAB>mask'")
        image = read_volume(root / parts[0])
        mask = read_volume(root / parts[1])
        if image.dtype != np.float32 or mask.dtype != np.uint8:
            raise ValueError(f"{manifest}:{lineno}: images must be f32 and masks u8")
        if image.ndim == mask.ndim:
            image = image[None]
        samples.append(SegSample(image, mask))
        names.append(Path(parts[0]).stem)
    if n_classes is None:
        top = max((int(s.mask.max()) for s in samples if s.mask.size), default=0)
        n_classes = max(2, top + 1)
    return Dataset(samples, n_classes, names)
