"""Matrix files: plain CSV and the tagged ``HAMM`` binary form."""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .kernels import ShapeError

MAGIC = b"HAMM"
_HEADER = struct.Struct("<4sII")


def to_csv_text(m: np.ndarray) -> str:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    buf = io.StringIO()
    for row in m:
        buf.write(",".join(repr(float(v)) for v in row))
        buf.write("\n")
    return buf.getvalue()


def write_csv(path, m: np.ndarray) -> None:
    Path(path).write_text(to_csv_text(m))


def read_csv(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    data = [[float(v) for v in line.split(",")] for line in rows]
    widths = {len(r) for r in data}
    if len(widths) > 1:
        raise ShapeError(f"{path}: ragged rows")
    return np.array(data, dtype=np.float64).reshape(len(data), widths.pop() if widths else 0)


def to_bytes(m: np.ndarray) -> bytes:
    m = np.asarray(m, dtype="<f8")
    if m.ndim != 2:
        raise ShapeError(f"binary matrix must be 2-D, got {m.shape}")
    return _HEADER.pack(MAGIC, m.shape[0], m.shape[1]) + np.ascontiguousarray(m).tobytes()


def from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise ValueError("truncated matrix file")
    magic, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    payload = blob[_HEADER.size:]
    if len(payload) != 8 * rows * cols:
        raise ValueError(f"payload holds {len(payload)} bytes, expected {8 * rows * cols}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_binary(path, m: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(m))


def read_binary(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
