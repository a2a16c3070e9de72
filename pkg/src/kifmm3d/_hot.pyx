# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Two hot paths live here: pairwise Laplace summation (near field and
verification oracles) and the per-frequency block multiply-accumulate used
by the FFT field translation. Everything else in the package is NumPy.
"""

from cython.parallel cimport prange

from libc.math cimport sqrt, sqrtf

ctypedef fused real_t:
    float
    double

ctypedef fused cplx_t:
    float complex
    double complex

cdef double INV_4PI = 0.079577471545947667884441881686257181


def laplace_potentials(real_t[::1] tx, real_t[::1] ty, real_t[::1] tz,
                       real_t[::1] sx, real_t[::1] sy, real_t[::1] sz,
                       real_t[:, ::1] charges, real_t[:, ::1] out,
                       int num_threads):
    """Accumulate 1/(4*pi*r) sums into ``out`` (n_targets, n_rhs).

    Coincident target/source pairs contribute zero. Per-target summation
    order is the source order, independent of thread count.
    """
    cdef Py_ssize_t nt = tx.shape[0]
    cdef Py_ssize_t ns = sx.shape[0]
    cdef Py_ssize_t nrhs = charges.shape[1]
    cdef Py_ssize_t i, j, r
    cdef real_t dx, dy, dz, r2, w, acc
    if nrhs == 1:
        for i in prange(nt, nogil=True, num_threads=num_threads, schedule='static'):
            acc = 0
            for j in range(ns):
                dx = tx[i] - sx[j]
                dy = ty[i] - sy[j]
                dz = tz[i] - sz[j]
                r2 = dx * dx + dy * dy + dz * dz
                if r2 > 0:
                    if real_t is float:
                        acc = acc + <real_t> (<float> INV_4PI / sqrtf(r2)) * charges[j, 0]
                    else:
                        acc = acc + <real_t> (INV_4PI / sqrt(r2)) * charges[j, 0]
            out[i, 0] += acc
    else:
        for i in prange(nt, nogil=True, num_threads=num_threads, schedule='static'):
            for j in range(ns):
                dx = tx[i] - sx[j]
                dy = ty[i] - sy[j]
                dz = tz[i] - sz[j]
                r2 = dx * dx + dy * dy + dz * dz
                if r2 > 0:
                    if real_t is float:
                        w = <real_t> (<float> INV_4PI / sqrtf(r2))
                    else:
                        w = <real_t> (INV_4PI / sqrt(r2))
                    for r in range(nrhs):
                        out[i, r] += w * charges[j, r]


def laplace_matrix(real_t[::1] tx, real_t[::1] ty, real_t[::1] tz,
                   real_t[::1] sx, real_t[::1] sy, real_t[::1] sz,
                   real_t[:, ::1] out, int num_threads):
    """Fill ``out[i, j] = K(target_i, source_j)``, zero on coincidence."""
    cdef Py_ssize_t nt = tx.shape[0]
    cdef Py_ssize_t ns = sx.shape[0]
    cdef Py_ssize_t i, j
    cdef real_t dx, dy, dz, r2
    for i in prange(nt, nogil=True, num_threads=num_threads, schedule='static'):
        for j in range(ns):
            dx = tx[i] - sx[j]
            dy = ty[i] - sy[j]
            dz = tz[i] - sz[j]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 > 0:
                if real_t is float:
                    out[i, j] = <real_t> (<float> INV_4PI / sqrtf(r2))
                else:
                    out[i, j] = <real_t> (INV_4PI / sqrt(r2))
            else:
                out[i, j] = 0


def p2p_blocked(real_t[::1] tx, real_t[::1] ty, real_t[::1] tz,
                long long[::1] leaf_of_target,
                real_t[::1] sx, real_t[::1] sy, real_t[::1] sz,
                real_t[:, ::1] charges,
                long long[::1] src_offsets,
                real_t[:, ::1] out, int num_threads):
    """Near-field sweep: target ``i`` sums over the gathered source range
    ``src_offsets[b]:src_offsets[b+1]`` of its leaf ``b = leaf_of_target[i]``.
    """
    cdef Py_ssize_t nt = tx.shape[0]
    cdef Py_ssize_t nrhs = charges.shape[1]
    cdef Py_ssize_t i, j, r, j0, j1
    cdef long long b
    cdef real_t dx, dy, dz, r2, w, acc
    if nrhs == 1:
        for i in prange(nt, nogil=True, num_threads=num_threads, schedule='static'):
            b = leaf_of_target[i]
            j0 = src_offsets[b]
            j1 = src_offsets[b + 1]
            acc = 0
            for j in range(j0, j1):
                dx = tx[i] - sx[j]
                dy = ty[i] - sy[j]
                dz = tz[i] - sz[j]
                r2 = dx * dx + dy * dy + dz * dz
                if r2 > 0:
                    if real_t is float:
                        acc = acc + <real_t> (<float> INV_4PI / sqrtf(r2)) * charges[j, 0]
                    else:
                        acc = acc + <real_t> (INV_4PI / sqrt(r2)) * charges[j, 0]
            out[i, 0] += acc
    else:
        for i in prange(nt, nogil=True, num_threads=num_threads, schedule='static'):
            b = leaf_of_target[i]
            j0 = src_offsets[b]
            j1 = src_offsets[b + 1]
            for j in range(j0, j1):
                dx = tx[i] - sx[j]
                dy = ty[i] - sy[j]
                dz = tz[i] - sz[j]
                r2 = dx * dx + dy * dy + dz * dz
                if r2 > 0:
                    if real_t is float:
                        w = <real_t> (<float> INV_4PI / sqrtf(r2))
                    else:
                        w = <real_t> (INV_4PI / sqrt(r2))
                    for r in range(nrhs):
                        out[i, r] += w * charges[j, r]


def hadamard_m2l(cplx_t[:, :, :, ::1] khat, cplx_t[:, :, :, ::1] qhat,
                 long long[:, ::1] halo, cplx_t[:, :, :, ::1] phat,
                 int block, int num_threads):
    """Frequency-major halo accumulation.

    khat: (n_freq, 26, 8, 8) spectra of the flipped kernel sequences
    qhat: (n_freq, n_src_clusters, 8, n_rhs) source child spectra
    halo: (n_tgt_clusters, 26) source-cluster index per halo slot, -1 absent
    phat: (n_freq, n_tgt_clusters, 8, n_rhs) accumulated output spectra

    Target clusters are walked in blocks of ``block``; the block size only
    affects traversal order within a frequency, never the result.
    """
    cdef Py_ssize_t nf = khat.shape[0]
    cdef Py_ssize_t ntc = halo.shape[0]
    cdef Py_ssize_t nrhs = qhat.shape[3]
    cdef Py_ssize_t f, c0, c1, c, o, tau, sig, r
    cdef long long s
    cdef cplx_t k
    if block < 1:
        block = 1
    for f in prange(nf, nogil=True, num_threads=num_threads, schedule='static'):
        c0 = 0
        while c0 < ntc:
            c1 = c0 + block
            if c1 > ntc:
                c1 = ntc
            for c in range(c0, c1):
                for o in range(26):
                    s = halo[c, o]
                    if s < 0:
                        continue
                    for tau in range(8):
                        for sig in range(8):
                            k = khat[f, o, tau, sig]
                            for r in range(nrhs):
                                phat[f, c, tau, r] = phat[f, c, tau, r] + k * qhat[f, s, sig, r]
            c0 = c1
