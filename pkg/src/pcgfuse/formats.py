"""Binary file formats: PCGF feature cache and PCGM model checkpoint.

Both are little-endian. PCGF::

    b"PCGF" | version u32 | rows u32 | cols u32 | tag_len u32 | tag utf-8 | rows*cols f32

PCGM::

    b"PCGM" | version u32 | count u32 | count * (name_len u32 | name utf-8 |
    rank u32 | dims u32*rank | prod(dims) f32)

Writes go through a temporary file and an atomic rename so concurrent
readers never see a partial file.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"PCGF"
MODEL_MAGIC = b"PCGM"
VERSION = 1


class FormatError(ValueError):
    pass


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()


def encode_features(values, tag: str) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    rows, cols = values.shape
    return (
        FEATURE_MAGIC
        + struct.pack("<III", VERSION, rows, cols)
        + _pack_str(tag)
        + np.ascontiguousarray(values, dtype="<f4").tobytes()
    )


def write_features(path, values, tag: str) -> None:
    _atomic_write(path, encode_features(values, tag))


def read_features(path) -> tuple[np.ndarray, str]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a PCGF feature file")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported PCGF version {version}")
    rows, cols = r.u32(2)
    tag = r.string()
    values = r.floats(rows * cols).reshape(rows, cols)
    return values, tag


def encode_checkpoint(tensors: dict) -> bytes:
    chunks = [MODEL_MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        chunks.append(_pack_str(name))
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_checkpoint(path, tensors: dict) -> None:
    _atomic_write(path, encode_checkpoint(tensors))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MODEL_MAGIC:
        raise FormatError(f"{path}: not a PCGM checkpoint")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported PCGM version {version}")
    out = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        dims = r.u32(rank) if rank else ()
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        out[name] = r.floats(int(np.prod(dims, dtype=np.int64))).reshape(dims).astype(np.float64)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after {len(out)} tensors")
    return out
