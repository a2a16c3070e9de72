"""Field translation as a chain of low-rank BLAS products.

All 316 source-to-target translation matrices at a level are compressed
against shared bases: a one-shot randomized SVD of the wide matrix formed
by all translations side by side gives the target-side basis U, the tall
stacked counterpart gives the source-side basis S, and each translation
collapses to a small core C_t = U^T K_t S that is recompressed per vector.
Applying a level then costs one projection, at most 316 small blocked
products, and one expansion: at most 318 BLAS calls.

Matrices are assembled on a unit box; a level is handled by scaling the
output once (degree -1 homogeneity).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernel
from .expansion import INNER_SCALE, surface
from .octree import (Octree, all_transfer_vectors, decode_codes,
                     encode_anchors, transfer_vector_index)

N_TRANSFER = 316


class CompressionError(RuntimeError):
    """No singular value survived the requested truncation."""


def transfer_offsets() -> np.ndarray:
    """The 316 admissible anchor offsets, lexicographic, as (316, 3) int64."""
    return np.array([tv.offset for tv in all_transfer_vectors()], dtype=np.int64)


def assemble_translation(offset, order_equiv: int, order_check: int,
                         dtype=np.float64, inner_scale: float = INNER_SCALE) -> np.ndarray:
    """Kernel matrix from the upward-equivalent surface of a unit source box
    at anchor ``offset`` to the downward-check surface of the unit target
    box at the origin."""
    src_center = np.asarray(offset, dtype=np.float64)
    src = surface(order_equiv, src_center, 1.0, inner_scale, dtype)
    tgt = surface(order_check, np.zeros(3), 1.0, inner_scale, dtype)
    return kernel.assemble_matrix(src, tgt, dtype=dtype)


def assemble_fat_thin(order_equiv: int, order_check: int, dtype=np.float64,
                      inner_scale: float = INNER_SCALE):
    """All translations side by side (fat) and stacked (thin).

    fat:  (n_check, 316 * n_equiv), blocks in canonical offset order
    thin: (316 * n_check, n_equiv)

    For this symmetric kernel with equal surface orders the thin matrix is
    the transpose of the fat one up to block order: negating an offset
    reverses its position in the canonical ordering.
    """
    offsets = transfer_offsets()
    blocks = [assemble_translation(off, order_equiv, order_check, dtype,
                                   inner_scale) for off in offsets]
    fat = np.ascontiguousarray(np.hstack(blocks))
    if order_equiv == order_check:
        thin = np.ascontiguousarray(np.vstack([b.T for b in blocks]))
    else:
        thin = np.ascontiguousarray(np.vstack(
            [assemble_translation(off, order_check, order_equiv, dtype,
                                  inner_scale).T for off in offsets]))
    return fat, thin


def rsvd(a: np.ndarray, rank: int, oversamples: int, rng) -> tuple:
    """One-shot randomized SVD: Gaussian sketch, QR, small exact SVD.

    Returns (u, s, v) with ``rank`` columns; no power iterations.
    """
    m, n = a.shape
    ell = rank + oversamples
    if not 1 <= rank:
        raise ValueError("rank must be positive")
    if ell > min(m, n):
        raise ValueError(f"rank + oversamples = {ell} exceeds min(shape) = {min(m, n)}")
    sketch = rng.standard_normal((n, ell)).astype(a.dtype, copy=False)
    y = a @ sketch
    q, _ = np.linalg.qr(y)
    b = q.T @ a
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q @ ub[:, :rank]
    return (np.ascontiguousarray(u), s[:rank].copy(),
            np.ascontiguousarray(vt[:rank].T))


@dataclass
class M2lBlasOperators:
    """Compressed level-independent translation operators."""

    order_equiv: int
    order_check: int
    sigma_min: float
    level_scale: float
    u: np.ndarray                       # (n_check, k) shared target basis
    s: np.ndarray                       # (n_equiv, k) shared source basis
    svals_fat: np.ndarray
    svals_thin: np.ndarray
    ubar: list = field(default_factory=list)    # per offset: (k, k_t)
    vbar: list = field(default_factory=list)    # per offset: (k, k_t), scaled right factor
    cores: list | None = None                   # per offset: (k, k) before recompression

    @property
    def k(self) -> int:
        return int(self.u.shape[1])


def compress(order_equiv: int, order_check: int, sigma_min: float = 1e-6,
             rank_estimate: int | None = None, oversamples: int = 5,
             seed: int = 0, dtype=np.float64,
             inner_scale: float = INNER_SCALE,
             level_scale: float = 1.0,
             fat_thin=None) -> M2lBlasOperators:
    """Build shared bases and the 316 core matrices.

    ``sigma_min`` is an absolute singular-value cutoff measured on the
    operator as applied at the finest tree level, where translation error
    dominates; ``level_scale`` is that level's kernel magnification
    (1/side for this degree -1 kernel, 1 for a unit box). Zero keeps every
    sketched column. Without a rank estimate the sketch spans the full
    row space minus the oversamples, so the estimate only ever trades
    accuracy for setup time. The random sketch is seeded, so equal inputs
    give equal operators.
    """
    from .expansion import n_surface

    n_equiv = n_surface(order_equiv)
    rng = np.random.default_rng(seed)
    if fat_thin is None:
        fat, thin = assemble_fat_thin(order_equiv, order_check, dtype, inner_scale)
    else:
        fat, thin = fat_thin

    full = min(min(fat.shape), min(thin.shape))
    if rank_estimate is None:
        rank_estimate = full - oversamples
    rank_fat = max(1, min(rank_estimate, min(fat.shape) - oversamples))
    u_fat, s_fat, _ = rsvd(fat, rank_fat, oversamples, rng)
    symmetric = order_equiv == order_check
    if symmetric:
        # thin = P fat^T for a block permutation P, so the right factor of
        # the thin matrix is the left factor of the fat one.
        s_basis, s_thin = u_fat, s_fat
    else:
        rank_thin = max(1, min(rank_estimate, min(thin.shape) - oversamples))
        _, s_thin, v_thin = rsvd(thin, rank_thin, oversamples, rng)
        s_basis = v_thin

    def truncation(svals):
        if svals.shape[0] == 0 or svals[0] <= 0:
            return 0
        if sigma_min <= 0:
            return svals.shape[0]
        return int(np.count_nonzero(svals * level_scale >= sigma_min))

    k = min(truncation(s_fat), truncation(s_thin))
    if k == 0:
        raise CompressionError("sigma_min truncated every singular value")

    u = np.ascontiguousarray(u_fat[:, :k])
    s = np.ascontiguousarray(s_basis[:, :k])
    proj = u.T @ fat                       # (k, 316 n_equiv), one pass
    cores = [np.ascontiguousarray(proj[:, i * n_equiv:(i + 1) * n_equiv] @ s)
             for i in range(N_TRANSFER)]
    return M2lBlasOperators(order_equiv=order_equiv, order_check=order_check,
                            sigma_min=sigma_min, level_scale=level_scale,
                            u=u, s=s,
                            svals_fat=s_fat.copy(), svals_thin=s_thin.copy(),
                            cores=cores)


def recompress(ops: M2lBlasOperators, sigma_min: float | None = None) -> M2lBlasOperators:
    """Split every core into thin factors C_t ~ ubar_t @ vbar_t^T by a
    deterministic SVD truncated at the same finest-level ``sigma_min``;
    the bases are orthonormal, so core singular values carry the original
    translation magnitudes and distant offsets shrink the hardest."""
    if ops.cores is None:
        raise ValueError("operators carry no cores to recompress")
    if sigma_min is None:
        sigma_min = ops.sigma_min
    ops.ubar = []
    ops.vbar = []
    for c in ops.cores:
        ub, sv, vt = np.linalg.svd(c, full_matrices=False)
        if sv.shape[0] and sv[0] > 0 and sigma_min > 0:
            kt = int(np.count_nonzero(sv * ops.level_scale >= sigma_min))
        else:
            kt = sv.shape[0] if (sv.shape[0] and sv[0] > 0) else 0
        ops.ubar.append(np.ascontiguousarray(ub[:, :kt]))
        ops.vbar.append(np.ascontiguousarray(vt[:kt].T * sv[:kt]))
    return ops


def precompute(order_equiv: int, order_check: int, sigma_min: float = 1e-6,
               rank_estimate: int | None = None, oversamples: int = 5,
               seed: int = 0, dtype=np.float64,
               inner_scale: float = INNER_SCALE,
               level_scale: float = 1.0) -> M2lBlasOperators:
    ops = compress(order_equiv, order_check, sigma_min, rank_estimate,
                   oversamples, seed, dtype, inner_scale, level_scale)
    return recompress(ops)


# --- per-level pair bucketing -------------------------------------------------


@dataclass
class TransferBuckets:
    """Far-field pairs of one level, grouped by transfer vector.

    ``pairs[i]`` is (source_rows, target_rows) into the level's sorted key
    arrays, or None when the i-th canonical offset has no pair. Within one
    bucket all target rows are distinct (a target meets each offset once),
    so bucket accumulation can scatter-add without collision.
    """

    level: int
    pairs: list

    @property
    def n_nonempty(self) -> int:
        return sum(1 for p in self.pairs if p is not None)


def bucket_level(source_tree: Octree, target_tree: Octree, level: int) -> TransferBuckets:
    """Group every admissible (source box, target box) pair at ``level``."""
    tgt_codes = target_tree.level_keys(level)
    src_codes = source_tree.level_keys(level)
    anchors, _ = decode_codes(tgt_codes)
    n = 1 << level
    offsets = transfer_offsets()
    pairs: list = [None] * N_TRANSFER
    if src_codes.shape[0] == 0 or tgt_codes.shape[0] == 0:
        return TransferBuckets(level=level, pairs=pairs)
    for i, off in enumerate(offsets):
        cand = anchors + off[None, :]
        ok = np.all((cand >= 0) & (cand < n), axis=1)
        # Far-field membership also needs adjacent parents, which depends
        # on anchor parity, not only on the offset.
        ok &= np.all(np.abs((cand >> 1) - (anchors >> 1)) <= 1, axis=1)
        if not ok.any():
            continue
        rows_t = np.flatnonzero(ok)
        codes = encode_anchors(cand[rows_t], level)
        pos = np.searchsorted(src_codes, codes)
        found = (pos < src_codes.shape[0])
        found &= src_codes[np.minimum(pos, src_codes.shape[0] - 1)] == codes
        if not found.any():
            continue
        pairs[i] = (pos[found].astype(np.int64), rows_t[found].astype(np.int64))
    return TransferBuckets(level=level, pairs=pairs)


# --- application ---------------------------------------------------------------


def _expand_rows(rows: np.ndarray, n_rhs: int) -> np.ndarray:
    if n_rhs == 1:
        return rows
    return (rows[:, None] * n_rhs + np.arange(n_rhs)[None, :]).ravel()


def apply_level(ops: M2lBlasOperators, buckets: TransferBuckets,
                multipoles: np.ndarray, n_targets: int,
                level_scale: float = 1.0, counter: list | None = None,
                strategy: str = "serial", threads: int = 1) -> np.ndarray:
    """Check potentials at every target box of one level.

    ``multipoles`` is (n_sources, n_rhs, n_equiv) over the level's source
    boxes; the result is (n_targets, n_rhs, n_check). ``counter``, when
    given, receives the number of blocked BLAS calls. ``strategy`` is
    ``serial`` or ``bucket-threads`` (lock-guarded accumulation); both give
    the same result up to floating-point accumulation order.
    """
    n_src, n_rhs, n_equiv = multipoles.shape
    dtype = multipoles.dtype
    calls = 0
    qt = multipoles.reshape(n_src * n_rhs, n_equiv) @ ops.s     # projection
    calls += 1
    acc = np.zeros((n_targets * n_rhs, ops.k), dtype=dtype)

    jobs = [(i, p) for i, p in enumerate(buckets.pairs) if p is not None]

    def run(job):
        i, (rows_s, rows_t) = job
        if ops.ubar[i].shape[1] == 0:
            return None
        g = qt[_expand_rows(rows_s, n_rhs)]
        return _expand_rows(rows_t, n_rhs), (g @ ops.vbar[i]) @ ops.ubar[i].T

    if strategy == "bucket-threads" and threads > 1 and len(jobs) > 1:
        import threading
        from concurrent.futures import ThreadPoolExecutor

        lock = threading.Lock()

        def worker(job):
            res = run(job)
            if res is not None:
                rows, val = res
                with lock:
                    acc[rows] += val

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(worker, jobs))
        calls += len(jobs)
    else:
        for job in jobs:
            res = run(job)
            if res is not None:
                rows, val = res
                acc[rows] += val
            calls += 1

    check = (acc @ ops.u.T) * dtype.type(level_scale)           # expansion
    calls += 1
    if counter is not None:
        counter.append(calls)
    return check.reshape(n_targets, n_rhs, ops.u.shape[0])
