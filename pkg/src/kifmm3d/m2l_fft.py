"""Field translation as FFT convolutions over sibling clusters.

With equal equivalent and check orders P, the P^3-corner surface lattice
embeds in a 2P-per-axis regular grid, and every translation becomes a
circular convolution against a fixed kernel sequence: the kernel is
sampled on the shifted grid, flipped per axis, and transformed once with
a real-input FFT. Work is organized around sibling clusters: the 8
children of a target parent receive contributions from the 8 children of
each of the up to 26 source parents in the parent's halo, an (8 x 8)
complex block per frequency. Slots whose child pair is actually adjacent
hold an all-zero sequence, as do halo positions absent from the source
tree, so the frequency loop is branch-free over offsets.

Grids and spectra are laid out frequency-major: for one frequency index,
all 26 * 64 kernel entries (and all cluster spectra) are contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from . import hotloops, kernel
from .expansion import INNER_SCALE, boundary_lattice, n_surface
from .octree import (Octree, child_index_codes, decode_codes, encode_anchors,
                     halo_offsets, parent_codes)


@dataclass
class ConvGrid:
    """Index maps between a surface lattice and its 2P-per-axis FFT grid."""

    order: int
    n_grid: int                 # 2 * order per axis
    n_freq: int                 # real-transform spectrum size
    embed_idx: np.ndarray       # surface point -> flat grid index (densities)
    read_idx: np.ndarray        # surface point -> flat grid index (potentials)


def build_conv_grid(order: int) -> ConvGrid:
    n = 2 * order
    lat = boundary_lattice(order)
    # Densities go to the upper-corner-aligned copy of the surface lattice;
    # potentials come back at the lattice positions themselves.
    embed = lat + order
    embed_idx = (embed[:, 0] * n + embed[:, 1]) * n + embed[:, 2]
    read_idx = (lat[:, 0] * n + lat[:, 1]) * n + lat[:, 2]
    n_freq = n * n * (n // 2 + 1)
    return ConvGrid(order=order, n_grid=n, n_freq=n_freq,
                    embed_idx=embed_idx.astype(np.int64),
                    read_idx=read_idx.astype(np.int64))


def kernel_grid(offset, order: int, dtype=np.float64,
                inner_scale: float = INNER_SCALE) -> np.ndarray:
    """Kernel samples on the convolution grid for a unit-box translation.

    Entry (j0, j1, j2) holds K evaluated at the vector from the grid point
    ``y0 + (j + 1 - P) h`` (source equivalent-grid spacing h, lower corner
    y0) to the lower corner of the target check grid; indices with any
    component 2P - 1 are zero. Flipping per axis turns the circular
    convolution with this sequence into the translation matrix product.
    """
    n = 2 * order
    h = inner_scale / (order - 1)
    off = np.asarray(offset, dtype=np.float64)
    j = np.arange(n, dtype=np.float64)
    # Component of the evaluation vector along one axis, per grid index.
    comp = [-(off[a]) - (j + 1 - order) * h for a in range(3)]
    r2 = (comp[0][:, None, None] ** 2 + comp[1][None, :, None] ** 2
          + comp[2][None, None, :] ** 2)
    with np.errstate(divide="ignore"):
        vals = kernel.INV_4PI / np.sqrt(r2)
    vals[~np.isfinite(vals)] = 0.0
    vals[n - 1, :, :] = 0.0
    vals[:, n - 1, :] = 0.0
    vals[:, :, n - 1] = 0.0
    return vals.astype(dtype)


@dataclass
class M2lFftOperators:
    """Spectra of all halo translation sequences at the unit level.

    ``khat`` has shape (n_freq, 26, 8, 8): per frequency, per halo offset,
    the target-child x source-child block. Inadmissible (adjacent) child
    pairs are zero blocks.
    """

    order: int
    grid: ConvGrid
    khat: np.ndarray

    @property
    def n_freq(self) -> int:
        return self.grid.n_freq


def kernel_sequences(order: int, halo_offset, dtype=np.float64,
                     inner_scale: float = INNER_SCALE,
                     workers: int | None = None) -> np.ndarray:
    """DFT'd flipped kernel sequences of one halo position.

    Returns (64, n_freq) complex, target-child-major: row 8 * tau + sigma
    maps source child sigma onto target child tau. Near-field pairs give
    zero rows.
    """
    grid = build_conv_grid(order)
    o = np.asarray(halo_offset, dtype=np.int64)
    out = np.zeros((64, grid.n_freq), dtype=np.complex64
                   if np.dtype(dtype) == np.float32 else np.complex128)
    child = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)],
                     dtype=np.int64)
    stack = []
    rows = []
    for tau in range(8):
        for sigma in range(8):
            rel = 2 * o + child[sigma] - child[tau]
            if np.abs(rel).max() < 2:
                continue
            stack.append(kernel_grid(rel, order, dtype, inner_scale))
            rows.append(8 * tau + sigma)
    if stack:
        flipped = np.flip(np.stack(stack), axis=(1, 2, 3))
        spec = scipy.fft.rfftn(flipped, axes=(1, 2, 3),
                               workers=hotloops.resolve_threads(workers))
        out[np.array(rows)] = spec.reshape(len(rows), grid.n_freq)
    return out


def precompute_fft_operators(order: int, dtype=np.float64,
                             inner_scale: float = INNER_SCALE,
                             workers: int | None = None) -> M2lFftOperators:
    """Assemble khat for all 26 halo offsets, one FFT per unique offset."""
    grid = build_conv_grid(order)
    cdtype = np.complex64 if np.dtype(dtype) == np.float32 else np.complex128
    child = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)],
                     dtype=np.int64)
    offsets = np.array(halo_offsets(), dtype=np.int64)

    # Unique admissible relative offsets across all (halo, tau, sigma) slots.
    rel_all = (2 * offsets[:, None, None, :] + child[None, None, :, :]
               - child[None, :, None, :])          # (26, 8 tau, 8 sigma, 3)
    admissible = np.abs(rel_all).max(axis=3) >= 2
    uniq, inverse = np.unique(rel_all.reshape(-1, 3), axis=0, return_inverse=True)
    grids = np.stack([kernel_grid(u, order, dtype, inner_scale) for u in uniq])
    spec = scipy.fft.rfftn(np.flip(grids, axis=(1, 2, 3)), axes=(1, 2, 3),
                           workers=hotloops.resolve_threads(workers))
    spec = spec.reshape(uniq.shape[0], grid.n_freq).astype(cdtype)

    khat = np.zeros((grid.n_freq, 26, 8, 8), dtype=cdtype)
    inverse = inverse.reshape(26, 8, 8)
    for o in range(26):
        for tau in range(8):
            for sigma in range(8):
                if admissible[o, tau, sigma]:
                    khat[:, o, tau, sigma] = spec[inverse[o, tau, sigma]]
    return M2lFftOperators(order=order, grid=grid,
                           khat=np.ascontiguousarray(khat))


# --- per-level cluster plan ---------------------------------------------------


@dataclass
class HaloPlan:
    """Sibling-cluster layout of one level.

    Boxes are grouped by parent; ``slot`` maps a level row to its cluster
    slot (cluster index * 8 + child index). ``halo`` maps each target
    cluster and halo offset to a source cluster index, -1 where the source
    tree has no boxes there.
    """

    level: int
    n_src_clusters: int
    n_tgt_clusters: int
    src_slot: np.ndarray     # (n_src_boxes,)
    tgt_slot: np.ndarray     # (n_tgt_boxes,)
    halo: np.ndarray         # (n_tgt_clusters, 26) int64


def build_halo_plan(source_tree: Octree, target_tree: Octree, level: int) -> HaloPlan:
    src_codes = source_tree.level_keys(level)
    tgt_codes = target_tree.level_keys(level)
    src_parents = parent_codes(src_codes)
    tgt_parents = parent_codes(tgt_codes)
    src_pcodes = np.unique(src_parents)
    tgt_pcodes = np.unique(tgt_parents)
    src_slot = (np.searchsorted(src_pcodes, src_parents) * 8
                + child_index_codes(src_codes))
    tgt_slot = (np.searchsorted(tgt_pcodes, tgt_parents) * 8
                + child_index_codes(tgt_codes))

    anchors, _ = decode_codes(tgt_pcodes)
    offsets = np.array(halo_offsets(), dtype=np.int64)
    n = 1 << (level - 1)
    halo = np.full((tgt_pcodes.shape[0], 26), -1, dtype=np.int64)
    for i, off in enumerate(offsets):
        cand = anchors + off[None, :]
        ok = np.all((cand >= 0) & (cand < n), axis=1)
        if not ok.any():
            continue
        rows = np.flatnonzero(ok)
        codes = encode_anchors(cand[rows], level - 1)
        pos = np.searchsorted(src_pcodes, codes)
        found = pos < src_pcodes.shape[0]
        found &= src_pcodes[np.minimum(pos, src_pcodes.shape[0] - 1)] == codes
        halo[rows[found], i] = pos[found]
    return HaloPlan(level=level, n_src_clusters=int(src_pcodes.shape[0]),
                    n_tgt_clusters=int(tgt_pcodes.shape[0]),
                    src_slot=src_slot.astype(np.int64),
                    tgt_slot=tgt_slot.astype(np.int64), halo=halo)


def m2l_fft_level(ops: M2lFftOperators, plan: HaloPlan,
                  multipoles: np.ndarray, level_scale: float = 1.0,
                  block_size: int = 32, threads: int | None = None) -> np.ndarray:
    """Check potentials at every target box of one level.

    ``multipoles`` is (n_src_boxes, n_rhs, n_equiv); the result is
    (n_tgt_boxes, n_rhs, n_check) with n_check = n_equiv. The block size
    tiles the target-cluster loop and never changes the result.
    """
    n_src, n_rhs, n_equiv = multipoles.shape
    if n_equiv != n_surface(ops.order):
        raise ValueError("multipole width does not match the operator order")
    grid = ops.grid
    n = grid.n_grid
    dtype = multipoles.dtype
    cdtype = np.complex64 if dtype == np.float32 else np.complex128
    workers = hotloops.resolve_threads(threads)

    # Forward transforms, one grid per (box, rhs).
    grids = np.zeros((n_src * n_rhs, n * n * n), dtype=dtype)
    grids[:, grid.embed_idx] = multipoles.reshape(n_src * n_rhs, n_equiv)
    qhat = scipy.fft.rfftn(grids.reshape(-1, n, n, n), axes=(1, 2, 3),
                           workers=workers)
    qhat = qhat.reshape(n_src, n_rhs, grid.n_freq).astype(cdtype, copy=False)

    # Stage cluster spectra frequency-major and run the halo accumulation.
    qcl = np.zeros((plan.n_src_clusters * 8, n_rhs, grid.n_freq), dtype=cdtype)
    qcl[plan.src_slot] = qhat
    qcl = np.ascontiguousarray(
        qcl.reshape(plan.n_src_clusters, 8, n_rhs, grid.n_freq).transpose(3, 0, 1, 2))
    phat = np.zeros((grid.n_freq, plan.n_tgt_clusters, 8, n_rhs), dtype=cdtype)
    hotloops.hadamard_m2l(ops.khat, qcl, plan.halo, phat, block=block_size,
                          threads=threads)

    # Back to box-major spectra, inverse transforms, read the surface.
    n_tgt = plan.tgt_slot.shape[0]
    spectra = phat.transpose(1, 2, 3, 0).reshape(
        plan.n_tgt_clusters * 8, n_rhs, grid.n_freq)[plan.tgt_slot]
    nf_shape = (n, n, n // 2 + 1)
    pot = scipy.fft.irfftn(spectra.reshape(-1, *nf_shape), s=(n, n, n),
                           axes=(1, 2, 3), workers=workers)
    check = pot.reshape(n_tgt * n_rhs, n * n * n)[:, grid.read_idx]
    check = check.astype(dtype, copy=False) * dtype.type(level_scale)
    return check.reshape(n_tgt, n_rhs, n_equiv)
