"""Point-cloud generation and file I/O for the command line tools.

The binary format is little-endian: magic ``KIFM``, a version byte, a
precision byte (4 or 8), a flag byte for attached charges, a uint64 point
count, then x, y, z (and charge) records. CSV files hold one x,y,z[,q]
row per point with an optional header line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"KIFM"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sBBBQ")


class PointFileError(IOError):
    """The file is missing, truncated, or not a recognized point format."""


@dataclass
class PointCloud:
    points: np.ndarray                 # (n, 3)
    charges: np.ndarray | None = None  # (n,) when present

    @property
    def n(self) -> int:
        return int(self.points.shape[0])


def generate_points(kind: str, n: int, seed: int = 0) -> np.ndarray:
    """Deterministic sample of ``n`` points for a named distribution.

    ``uniform-cube`` fills the unit cube; ``sphere-surface`` places points
    on the unit sphere (normalized Gaussian triples).
    """
    if n < 1:
        raise ValueError("the point count must be positive")
    rng = np.random.default_rng(seed)
    if kind == "uniform-cube":
        return rng.random((n, 3))
    if kind == "sphere-surface":
        v = rng.standard_normal((n, 3))
        norm = np.linalg.norm(v, axis=1)
        while np.any(norm == 0):        # astronomically unlikely, but exact
            bad = norm == 0
            v[bad] = rng.standard_normal((int(bad.sum()), 3))
            norm = np.linalg.norm(v, axis=1)
        return v / norm[:, None]
    raise ValueError(f"unknown point distribution {kind!r}")


def write_binary(path, points, charges=None):
    p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    has_q = charges is not None
    record = p
    if has_q:
        q = np.asarray(charges, dtype=np.float64).reshape(-1)
        if q.shape[0] != p.shape[0]:
            raise ValueError("charge count does not match point count")
        record = np.hstack([p, q[:, None]])
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, 8, int(has_q), p.shape[0]))
        fh.write(record.astype("<f8").tobytes())


def read_binary(path) -> PointCloud:
    try:
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            if len(head) < _HEADER.size:
                raise PointFileError(f"{path}: truncated header")
            magic, version, width, has_q, count = _HEADER.unpack(head)
            if magic != MAGIC:
                raise PointFileError(f"{path}: bad magic {magic!r}")
            if version != FORMAT_VERSION:
                raise PointFileError(f"{path}: unsupported version {version}")
            if width not in (4, 8):
                raise PointFileError(f"{path}: unsupported precision {width}")
            cols = 3 + int(bool(has_q))
            raw = fh.read(count * cols * width)
    except OSError as exc:
        raise PointFileError(str(exc)) from exc
    if len(raw) != count * cols * width:
        raise PointFileError(f"{path}: truncated body")
    dt = "<f4" if width == 4 else "<f8"
    data = np.frombuffer(raw, dtype=dt).reshape(count, cols).astype(np.float64)
    charges = data[:, 3].copy() if cols == 4 else None
    return PointCloud(points=np.ascontiguousarray(data[:, :3]), charges=charges)


def read_csv(path) -> PointCloud:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline()
            skip = 0
            fields = first.strip().split(",")
            try:
                [float(v) for v in fields if v != ""]
            except ValueError:
                skip = 1
        data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    except (OSError, ValueError) as exc:
        raise PointFileError(f"{path}: {exc}") from exc
    if data.shape[1] not in (3, 4):
        raise PointFileError(f"{path}: expected 3 or 4 columns, found {data.shape[1]}")
    charges = data[:, 3].copy() if data.shape[1] == 4 else None
    return PointCloud(points=np.ascontiguousarray(data[:, :3]), charges=charges)


def load_points(path) -> PointCloud:
    """Binary when the magic matches, CSV otherwise."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise PointFileError(str(exc)) from exc
    if head == MAGIC:
        return read_binary(path)
    return read_csv(path)
