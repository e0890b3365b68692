"""Grid data types, feasibility checks and the binary field file format.

Node ``(row, col)`` sits at physical position ``x = col * h``, ``y = row * h``.
Tensor and vector components are ordered ``(x, y)``: ``g11`` and ``b1`` act
along the column axis, ``g22`` and ``b2`` along the row axis.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

UNREACHED = 1e10
# anything at or above this is treated as not reached by the front
UNREACHED_THRESHOLD = 1e9

MAGIC = b"RFEK1\n"
_HEADER = struct.Struct("<III")


class FieldFileError(ValueError):
    """Base class for malformed field files."""


class BadMagic(FieldFileError):
    pass


class TruncatedFile(FieldFileError):
    pass


class ZeroDimension(FieldFileError):
    pass


class DimensionMismatch(ValueError):
    pass


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    h: float = 1.0

    def __post_init__(self):
        if self.rows < 3 or self.cols < 3:
            raise ValueError(f"grid must be at least 3x3, got {self.rows}x{self.cols}")
        if not self.h > 0:
            raise ValueError(f"grid spacing must be positive, got {self.h}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical ``(x, y)`` coordinate arrays of every node."""
        y, x = np.meshgrid(np.arange(self.rows) * self.h,
                           np.arange(self.cols) * self.h, indexing="ij")
        return x, y


@dataclass
class MetricField:
    g11: np.ndarray
    g12: np.ndarray
    g22: np.ndarray

    def __post_init__(self):
        self.g11 = np.ascontiguousarray(self.g11, dtype=np.float64)
        self.g12 = np.ascontiguousarray(self.g12, dtype=np.float64)
        self.g22 = np.ascontiguousarray(self.g22, dtype=np.float64)
        if not (self.g11.shape == self.g12.shape == self.g22.shape) or self.g11.ndim != 2:
            raise DimensionMismatch("metric channels must share one 2-D shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.g11.shape

    @classmethod
    def isotropic(cls, shape, g=1.0) -> "MetricField":
        g = np.broadcast_to(np.asarray(g, dtype=np.float64), shape).copy()
        return cls(g, np.zeros(shape), g.copy())

    @classmethod
    def constant(cls, shape, G) -> "MetricField":
        G = np.asarray(G, dtype=np.float64)
        return cls(np.full(shape, G[0, 0]), np.full(shape, G[0, 1]), np.full(shape, G[1, 1]))

    def det(self) -> np.ndarray:
        return self.g11 * self.g22 - self.g12 ** 2

    def eigenvalues(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-node ``(lambda_max, lambda_min)``."""
        mean = 0.5 * (self.g11 + self.g22)
        rad = 0.5 * np.sqrt((self.g11 - self.g22) ** 2 + 4.0 * self.g12 ** 2)
        return mean + rad, mean - rad

    def is_spd(self) -> bool:
        return bool(np.all(self.g11 > 0) and np.all(self.g22 > 0) and np.all(self.det() > 0))

    def channels(self) -> list[np.ndarray]:
        return [self.g11, self.g12, self.g22]

    def copy(self) -> "MetricField":
        return MetricField(self.g11.copy(), self.g12.copy(), self.g22.copy())


@dataclass
class DriftField:
    b1: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.b1 = np.ascontiguousarray(self.b1, dtype=np.float64)
        self.b2 = np.ascontiguousarray(self.b2, dtype=np.float64)
        if self.b1.shape != self.b2.shape or self.b1.ndim != 2:
            raise DimensionMismatch("drift channels must share one 2-D shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.b1.shape

    @classmethod
    def zeros(cls, shape) -> "DriftField":
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def constant(cls, shape, b) -> "DriftField":
        return cls(np.full(shape, float(b[0])), np.full(shape, float(b[1])))

    def dual_norm_sq(self, G: MetricField) -> np.ndarray:
        """Squared ``G^-1`` norm of the drift at every node."""
        num = self.b1 ** 2 * G.g22 - 2.0 * self.b1 * self.b2 * G.g12 + self.b2 ** 2 * G.g11
        return num / G.det()

    def channels(self) -> list[np.ndarray]:
        return [self.b1, self.b2]

    def copy(self) -> "DriftField":
        return DriftField(self.b1.copy(), self.b2.copy())


def check_sources(src: np.ndarray, shape=None) -> np.ndarray:
    src = np.asarray(src, dtype=bool)
    if shape is not None and src.shape != tuple(shape):
        raise DimensionMismatch(f"source mask shape {src.shape} does not match grid {tuple(shape)}")
    if not src.any():
        raise ValueError("source mask has no source nodes")
    return src


def point_sources(shape, points: Sequence[tuple[int, int]]) -> np.ndarray:
    src = np.zeros(shape, dtype=bool)
    for r, c in points:
        src[r, c] = True
    return src


def is_reached(T: np.ndarray) -> np.ndarray:
    return np.asarray(T) < UNREACHED_THRESHOLD


# --------------------------------------------------------------------------
# FieldFile I/O
# --------------------------------------------------------------------------

def _stack_channels(arrays) -> np.ndarray:
    if isinstance(arrays, np.ndarray):
        arrays = [arrays] if arrays.ndim == 2 else list(arrays)
    arrays = [np.asarray(a, dtype="<f8") for a in arrays]
    if not arrays:
        raise DimensionMismatch("no channels to write")
    shape = arrays[0].shape
    if len(shape) != 2:
        raise DimensionMismatch(f"channels must be 2-D, got shape {shape}")
    for a in arrays[1:]:
        if a.shape != shape:
            raise DimensionMismatch(f"channel shapes differ: {shape} vs {a.shape}")
    return np.stack(arrays, axis=-1)


def write_field(path, arrays) -> None:
    """Write one or more equally shaped 2-D channels as a FieldFile.

    ``arrays`` is a 2-D array (single channel), a 3-D ``(channels, rows, cols)``
    array, or a sequence of 2-D arrays.
    """
    data = _stack_channels(arrays)
    rows, cols, channels = data.shape
    if rows == 0 or cols == 0:
        raise ZeroDimension("cannot write an empty field")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_HEADER.pack(rows, cols, channels))
            fh.write(np.ascontiguousarray(data).tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_field(path) -> tuple[tuple[int, int], list[np.ndarray]]:
    """Read a FieldFile, returning ``((rows, cols), [channel, ...])``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: not a field file")
    off = len(MAGIC)
    if len(raw) < off + _HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    rows, cols, channels = _HEADER.unpack_from(raw, off)
    if rows == 0 or cols == 0 or channels == 0:
        raise ZeroDimension(f"{path}: zero dimension in header ({rows}, {cols}, {channels})")
    off += _HEADER.size
    n = rows * cols * channels
    if len(raw) < off + 8 * n:
        raise TruncatedFile(f"{path}: expected {8 * n} payload bytes, found {len(raw) - off}")
    data = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(rows, cols, channels)
    return (rows, cols), [data[:, :, c].astype(np.float64) for c in range(channels)]


def _fmt(v: float) -> str:
    v = float(v)
    if np.isfinite(v) and v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def export_csv(arrays, path) -> None:
    """Write a single channel as plain CSV, one grid row per line."""
    data = _stack_channels(arrays)
    if data.shape[2] != 1:
        raise DimensionMismatch("CSV export takes exactly one channel")
    lines = [",".join(_fmt(v) for v in row) for row in data[:, :, 0]]
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_metric(path) -> MetricField:
    _, ch = read_field(path)
    if len(ch) == 1:
        return MetricField.isotropic(ch[0].shape, ch[0])
    if len(ch) != 3:
        raise DimensionMismatch(f"{path}: metric file needs 1 or 3 channels, has {len(ch)}")
    return MetricField(*ch)


def load_drift(path) -> DriftField:
    _, ch = read_field(path)
    if len(ch) != 2:
        raise DimensionMismatch(f"{path}: drift file needs 2 channels, has {len(ch)}")
    return DriftField(*ch)
