"""Dispatch between the compiled extension and the NumPy fallback.

The compiled module is preferred when it imported cleanly; set
``KIFMM_PURE_PYTHON=1`` to force the fallback. ``KIFMM_THREADS`` (or an
explicit ``threads`` argument) bounds the thread count of the compiled
loops and of the FFT provider.
"""

import os

import numpy as np

if os.environ.get("KIFMM_PURE_PYTHON", "").strip().lower() in {"1", "true", "yes"}:
    from . import _hot_fallback as _impl

    COMPILED = False
else:
    try:
        from . import _hot as _impl  # type: ignore[attr-defined]

        COMPILED = True
    except ImportError:
        from . import _hot_fallback as _impl

        COMPILED = False

BACKEND = "compiled" if COMPILED else "python"


def default_threads() -> int:
    env = os.environ.get("KIFMM_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            n = 0
        if n >= 1:
            return n
    return os.cpu_count() or 1


def resolve_threads(threads=None) -> int:
    if threads is None:
        return default_threads()
    return max(1, int(threads))


def _soa(points, dtype):
    p = np.ascontiguousarray(points, dtype=dtype)
    return (np.ascontiguousarray(p[:, 0]), np.ascontiguousarray(p[:, 1]),
            np.ascontiguousarray(p[:, 2]))


def laplace_potentials(tx, ty, tz, sx, sy, sz, charges, out, threads=None):
    _impl.laplace_potentials(tx, ty, tz, sx, sy, sz, charges, out,
                             resolve_threads(threads))
    return out


def laplace_matrix(tx, ty, tz, sx, sy, sz, out=None, threads=None):
    if out is None:
        out = np.empty((tx.shape[0], sx.shape[0]), dtype=tx.dtype)
    _impl.laplace_matrix(tx, ty, tz, sx, sy, sz, out, resolve_threads(threads))
    return out


def p2p_blocked(tx, ty, tz, leaf_of_target, sx, sy, sz, charges, src_offsets,
                out, threads=None):
    _impl.p2p_blocked(tx, ty, tz, leaf_of_target, sx, sy, sz, charges,
                      src_offsets, out, resolve_threads(threads))
    return out


def hadamard_m2l(khat, qhat, halo, phat, block=32, threads=None):
    _impl.hadamard_m2l(khat, qhat, halo, phat, int(block),
                       resolve_threads(threads))
    return phat
