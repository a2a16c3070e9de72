"""NumPy fallback for the compiled inner loops.

Signatures mirror ``_hot`` so the dispatcher can swap modules freely. The
multi-RHS paths apply the kernel weights one RHS column at a time so that a
batched call reproduces the single-RHS call bit for bit.
"""

import numpy as np

INV_4PI = 0.079577471545947667884441881686257181

# Cap on the number of pairwise distances materialized per chunk.
_CHUNK_ELEMS = 4_000_000


def _weights(tx, ty, tz, sx, sy, sz):
    dx = tx[:, None] - sx[None, :]
    dy = ty[:, None] - sy[None, :]
    dz = tz[:, None] - sz[None, :]
    r2 = dx * dx
    r2 += dy * dy
    r2 += dz * dz
    np.sqrt(r2, out=r2)
    with np.errstate(divide="ignore"):
        w = np.array(r2.dtype.type(INV_4PI), dtype=r2.dtype) / r2
    w[r2 == 0] = 0
    return w


def laplace_potentials(tx, ty, tz, sx, sy, sz, charges, out, num_threads):
    ns = sx.shape[0]
    nrhs = charges.shape[1]
    step = max(1, _CHUNK_ELEMS // max(ns, 1))
    for i0 in range(0, tx.shape[0], step):
        i1 = min(i0 + step, tx.shape[0])
        w = _weights(tx[i0:i1], ty[i0:i1], tz[i0:i1], sx, sy, sz)
        for r in range(nrhs):
            out[i0:i1, r] += w @ charges[:, r]


def laplace_matrix(tx, ty, tz, sx, sy, sz, out, num_threads):
    ns = sx.shape[0]
    step = max(1, _CHUNK_ELEMS // max(ns, 1))
    for i0 in range(0, tx.shape[0], step):
        i1 = min(i0 + step, tx.shape[0])
        out[i0:i1] = _weights(tx[i0:i1], ty[i0:i1], tz[i0:i1], sx, sy, sz)


def p2p_blocked(tx, ty, tz, leaf_of_target, sx, sy, sz, charges,
                src_offsets, out, num_threads):
    # Targets arrive grouped by leaf, so leaf boundaries are contiguous runs.
    bounds = np.searchsorted(leaf_of_target, np.arange(src_offsets.shape[0]))
    for b in range(src_offsets.shape[0] - 1):
        i0, i1 = bounds[b], bounds[b + 1]
        j0, j1 = src_offsets[b], src_offsets[b + 1]
        if i0 == i1 or j0 == j1:
            continue
        laplace_potentials(tx[i0:i1], ty[i0:i1], tz[i0:i1],
                           sx[j0:j1], sy[j0:j1], sz[j0:j1],
                           charges[j0:j1], out[i0:i1], num_threads)


def hadamard_m2l(khat, qhat, halo, phat, block, num_threads):
    # Batched over frequencies: for each halo slot, one (8,8) x (8,n_rhs)
    # matmul per admissible (target cluster, source cluster) pair.
    for o in range(26):
        src = halo[:, o]
        hit = np.flatnonzero(src >= 0)
        if hit.size == 0:
            continue
        blk = khat[:, o][:, None]          # (n_freq, 1, 8, 8)
        phat[:, hit] += blk @ qhat[:, src[hit]]
