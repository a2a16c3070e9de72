"""Laplace kernel: scalar evaluation, matrix assembly, direct summation.

The 3D free-space Green's function 1/(4*pi*|x - y|), with the convention
that a coincident pair contributes zero (self-interaction is excluded).
All bulk paths go through :mod:`kifmm3d.hotloops`.
"""

from __future__ import annotations

import math

import numpy as np

from . import hotloops

INV_4PI = 1.0 / (4.0 * math.pi)


def evaluate(x, y) -> float:
    """Kernel value for a single pair of 3D points."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = math.sqrt(float(((x - y) ** 2).sum()))
    if r == 0.0:
        return 0.0
    return INV_4PI / r


def evaluate_2d(x, y) -> float:
    """2D branch, -log(|x - y|)/(2*pi); provided for completeness only."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = math.sqrt(float(((x - y) ** 2).sum()))
    if r == 0.0:
        return 0.0
    return -math.log(r) / (2.0 * math.pi)


def homogeneity_scale(level_delta: int) -> float:
    """Factor relating kernel matrices of geometrically similar box pairs.

    Shrinking all distances by 2**delta multiplies kernel values by
    2**delta for this degree -1 kernel.
    """
    return float(2.0 ** level_delta)


def _soa(points, dtype):
    p = np.ascontiguousarray(np.asarray(points, dtype=dtype).reshape(-1, 3))
    return (np.ascontiguousarray(p[:, 0]), np.ascontiguousarray(p[:, 1]),
            np.ascontiguousarray(p[:, 2]))


def as_charge_matrix(charges, n_sources: int) -> np.ndarray:
    """Normalize charge input to (n_sources, n_rhs).

    Accepts (n,), (n, n_rhs), or a flat vector of length n*n_rhs laid out
    as consecutive per-RHS blocks.
    """
    q = np.asarray(charges)
    if q.ndim == 1:
        if q.shape[0] == n_sources:
            return q.reshape(n_sources, 1)
        if q.shape[0] % n_sources == 0:
            return q.reshape(-1, n_sources).T
        raise ValueError(f"charge vector length {q.shape[0]} does not cover "
                         f"{n_sources} sources")
    if q.ndim == 2 and q.shape[0] == n_sources:
        return q
    raise ValueError(f"charge array shape {q.shape} does not match "
                     f"{n_sources} sources")


def assemble_matrix(sources, targets, dtype=np.float64, threads=None) -> np.ndarray:
    """Dense kernel matrix with entry (i, j) = K(target_i, source_j)."""
    tx, ty, tz = _soa(targets, dtype)
    sx, sy, sz = _soa(sources, dtype)
    out = np.empty((tx.shape[0], sx.shape[0]), dtype=dtype)
    hotloops.laplace_matrix(tx, ty, tz, sx, sy, sz, out, threads=threads)
    return out


def direct_potentials(sources, charges, targets, dtype=None, out=None,
                      threads=None) -> np.ndarray:
    """Sum of charge-weighted kernel values at each target.

    A batched call with n_rhs columns reproduces n_rhs single-RHS calls
    exactly: every column is accumulated in the same source order.
    """
    src = np.asarray(sources, dtype=np.float64).reshape(-1, 3)
    if dtype is None:
        dtype = np.asarray(sources).dtype
        if dtype not in (np.float32, np.float64):
            dtype = np.float64
    q = as_charge_matrix(charges, src.shape[0])
    squeeze = np.asarray(charges).ndim == 1 and q.shape[1] == 1
    tx, ty, tz = _soa(targets, dtype)
    sx, sy, sz = _soa(src, dtype)
    qm = np.ascontiguousarray(q, dtype=dtype)
    if out is None:
        out = np.zeros((tx.shape[0], qm.shape[1]), dtype=dtype)
    hotloops.laplace_potentials(tx, ty, tz, sx, sy, sz, qm, out, threads=threads)
    return out[:, 0] if squeeze else out
