"""FMM engine: configuration, setup, and the evaluation passes.

Separate source and target trees share one domain and depth. Evaluation
runs the upward pass (P2M at the leaves, M2M to the root), a downward
sweep per level (field translation with the configured back end, the
check-to-local solve, L2L to the children), and the leaf passes (L2P plus
direct near field). All per-box operators act on (n_boxes, n_rhs, width)
buffers so multiple right-hand sides ride through the same blocked
products.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import hotloops, kernel, m2l_blas, m2l_fft
from .expansion import ExpansionOperators, surface
from .octree import (MAX_DEPTH, Domain, MortonKey, Octree, child_index_codes,
                     neighbors, parent_codes)

OPERATOR_NAMES = ("p2m", "m2m", "m2l", "l2l", "l2p", "p2p")


class ConfigError(ValueError):
    """An FmmConfig field is out of range or inconsistent."""


@dataclass
class FmmConfig:
    """Engine parameters. Defaults follow the double-precision reference
    configuration used in the acceptance runs."""

    depth: int = 3
    order_equiv: int = 6
    order_check: int | None = None
    backend: str = "blas"
    precision: str = "f64"
    sigma_min: float = 1e-6
    oversamples: int = 5
    rank_estimate: int | None = None
    alpha: float = 0.0
    svd_cutoff: float | None = None
    block_size: int = 32
    n_rhs: int = 1
    seed: int = 0
    threads: int | None = None
    m2l_strategy: str | None = None
    p2m_block: int = 4        # sibling sets per blocked P2M solve
    m2m_block: int = 2        # sibling sets per blocked M2M/L2L product
    inner_scale: float = 1.05
    outer_scale: float = 2.95

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 2 <= self.depth <= MAX_DEPTH:
            raise ConfigError(f"depth must lie in [2, {MAX_DEPTH}]")
        if self.order_equiv < 2:
            raise ConfigError("the equivalent surface order must be at least 2")
        oc = self.order_check if self.order_check is not None else self.order_equiv
        if oc < self.order_equiv:
            raise ConfigError("the check order must be at least the equivalent order")
        if self.backend not in ("blas", "fft"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "fft" and oc != self.order_equiv:
            raise ConfigError("the FFT back end needs equal surface orders")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.sigma_min < 0:
            raise ConfigError("sigma_min must be nonnegative")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.oversamples < 1:
            raise ConfigError("oversamples must be at least 1")
        if self.block_size < 1:
            raise ConfigError("block_size must be at least 1")
        if self.n_rhs < 1:
            raise ConfigError("n_rhs must be at least 1")
        if self.p2m_block < 1 or self.m2m_block < 1:
            raise ConfigError("sibling block sizes must be at least 1")
        if self.m2l_strategy not in (None, "serial", "bucket-threads"):
            raise ConfigError(f"unknown m2l strategy {self.m2l_strategy!r}")
        if not 0 < self.inner_scale < self.outer_scale:
            raise ConfigError("surface scales must satisfy 0 < inner < outer")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def resolved_order_check(self) -> int:
        return self.order_check if self.order_check is not None else self.order_equiv

    def resolved_threads(self) -> int:
        return hotloops.resolve_threads(self.threads)

    def resolved_m2l_strategy(self) -> str:
        if self.m2l_strategy is not None:
            return self.m2l_strategy
        return "serial" if self.resolved_threads() <= 16 else "bucket-threads"


class ErrorStats(NamedTuple):
    """Sampled relative error; targets with exactly zero direct potential
    are excluded from the mean and counted."""

    error: float
    n_excluded: int


@dataclass
class FmmInstance:
    config: FmmConfig
    domain: Domain
    source_tree: Octree
    target_tree: Octree
    expansions: ExpansionOperators
    blas_ops: m2l_blas.M2lBlasOperators | None = None
    buckets: dict = field(default_factory=dict)
    fft_ops: m2l_fft.M2lFftOperators | None = None
    halo_plans: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    setup_seconds: float = 0.0
    m2l_calls: list = field(default_factory=list)
    multipoles: list = field(default_factory=list)
    locals_: list = field(default_factory=list)
    n_near_pairs: int = 0
    _sx: np.ndarray | None = None
    _last_charges: np.ndarray | None = None

    def evaluate(self, charges):
        return evaluate(self, charges)

    def attach_charges(self, charges):
        return attach_charges(self, charges)

    def relative_error(self, potentials, leaf=None) -> ErrorStats:
        return relative_error(self, potentials, leaf)

    def operator_timings(self) -> dict:
        return operator_timings(self)


def _leaf_surfaces(tree: Octree, order: int, scale: float, dtype):
    """Per-leaf surface grids as one (n_leaves, n_surface, 3) array."""
    from .octree import decode_codes

    anchors, _ = decode_codes(tree.leaves)
    side = tree.domain.box_side(tree.depth)
    centers = (np.asarray(tree.domain.origin) + (anchors + 0.5) * side)
    base = surface(order, np.zeros(3), side, scale, np.float64)
    pts = centers[:, None, :] + base[None, :, :]
    return np.ascontiguousarray(pts, dtype=dtype)


def setup(sources, targets, config: FmmConfig) -> FmmInstance:
    """Build both trees, the expansion operators, and the per-level plans
    of the configured field-translation back end."""
    t0 = time.perf_counter()
    config.validate()
    src = np.ascontiguousarray(np.asarray(sources, dtype=np.float64).reshape(-1, 3))
    tgt = np.ascontiguousarray(np.asarray(targets, dtype=np.float64).reshape(-1, 3))
    if src.shape[0] < 1 or tgt.shape[0] < 1:
        raise ConfigError("both point sets must be nonempty")
    domain = Domain.from_points(np.vstack([src, tgt]))
    source_tree = Octree(src, config.depth, domain)
    target_tree = Octree(tgt, config.depth, domain)

    dtype = config.dtype
    exp = ExpansionOperators(config.order_equiv, config.resolved_order_check(),
                             dtype=dtype, alpha=config.alpha,
                             cutoff=config.svd_cutoff,
                             inner_scale=config.inner_scale,
                             outer_scale=config.outer_scale)
    inst = FmmInstance(config=config, domain=domain, source_tree=source_tree,
                       target_tree=target_tree, expansions=exp)

    if config.backend == "blas":
        inst.blas_ops = m2l_blas.precompute(
            config.order_equiv, config.resolved_order_check(),
            sigma_min=config.sigma_min, rank_estimate=config.rank_estimate,
            oversamples=config.oversamples, seed=config.seed, dtype=dtype,
            inner_scale=config.inner_scale,
            level_scale=1.0 / domain.box_side(config.depth))
        for lvl in range(2, config.depth + 1):
            inst.buckets[lvl] = m2l_blas.bucket_level(source_tree, target_tree, lvl)
    else:
        inst.fft_ops = m2l_fft.precompute_fft_operators(
            config.order_equiv, dtype=dtype, inner_scale=config.inner_scale,
            workers=config.threads)
        for lvl in range(2, config.depth + 1):
            inst.halo_plans[lvl] = m2l_fft.build_halo_plan(source_tree,
                                                           target_tree, lvl)

    # Coordinates in the working dtype.
    inst._sx = np.ascontiguousarray(source_tree.x, dtype=dtype)
    inst._sy = np.ascontiguousarray(source_tree.y, dtype=dtype)
    inst._sz = np.ascontiguousarray(source_tree.z, dtype=dtype)
    inst._tx = np.ascontiguousarray(target_tree.x, dtype=dtype)
    inst._ty = np.ascontiguousarray(target_tree.y, dtype=dtype)
    inst._tz = np.ascontiguousarray(target_tree.z, dtype=dtype)

    # Per-leaf surfaces: upward check grids (sources), downward equivalent
    # grids (targets), both at the outer scale.
    inst._src_check = _leaf_surfaces(source_tree, config.resolved_order_check(),
                                     config.outer_scale, dtype)
    inst._tgt_equiv = _leaf_surfaces(target_tree, config.order_equiv,
                                     config.outer_scale, dtype)

    # Upward/downward parent-child maps per level.
    inst._up_maps = {}
    inst._down_maps = {}
    for lvl in range(1, config.depth + 1):
        for tree, maps in ((source_tree, inst._up_maps),
                           (target_tree, inst._down_maps)):
            child_codes = tree.level_keys(lvl)
            prow = np.searchsorted(tree.level_keys(lvl - 1), parent_codes(child_codes))
            maps[lvl] = (prow.astype(np.int64), child_index_codes(child_codes))

    # Near-field gather: for each target leaf, the tree-order rows of every
    # source point in its neighborhood (itself plus adjacent leaves).
    leaf_rows = []
    offsets = [0]
    src_leaf_index = {int(c): i for i, c in enumerate(source_tree.leaves)}
    for code in target_tree.leaves:
        key = MortonKey.from_code(code)
        rows = []
        own = src_leaf_index.get(int(code))
        if own is not None:
            sl = source_tree.leaf_slice(code)
            rows.append(np.arange(sl.start, sl.stop, dtype=np.int64))
        for nb in neighbors(key):
            j = src_leaf_index.get(nb.code)
            if j is not None:
                sl = source_tree.leaf_slice(nb.code)
                rows.append(np.arange(sl.start, sl.stop, dtype=np.int64))
        gathered = (np.concatenate(rows) if rows
                    else np.empty(0, dtype=np.int64))
        leaf_rows.append(gathered)
        offsets.append(offsets[-1] + gathered.shape[0])
    inst._near_idx = (np.concatenate(leaf_rows) if leaf_rows
                      else np.empty(0, dtype=np.int64))
    inst._near_offsets = np.asarray(offsets, dtype=np.int64)
    inst._near_sx = inst._sx[inst._near_idx]
    inst._near_sy = inst._sy[inst._near_idx]
    inst._near_sz = inst._sz[inst._near_idx]
    # Targets in tree order are grouped by leaf already.
    inst._leaf_of_target = np.repeat(
        np.arange(target_tree.leaves.shape[0], dtype=np.int64),
        target_tree.leaf_counts)
    counts = np.diff(inst._near_offsets)
    inst.n_near_pairs = int((counts * target_tree.leaf_counts).sum())

    inst.setup_seconds = time.perf_counter() - t0
    return inst


def _solve_block(inv, phi_block, scale, out_rows, buffer):
    """phi_block: (n_boxes, n_rhs, n_check) -> add solved densities into
    ``buffer`` rows (n_boxes, n_rhs, n_equiv)."""
    nb, n_rhs, n_check = phi_block.shape
    sol = inv.apply(phi_block.reshape(nb * n_rhs, n_check).T, scale=scale)
    buffer[out_rows] += sol.T.reshape(nb, n_rhs, -1)


def evaluate(inst: FmmInstance, charges) -> np.ndarray:
    """Potentials at every target point for one or more charge columns.

    Accepts (n_sources,), (n_sources, n_rhs), or a flat per-RHS-block
    vector; the result matches the input arrangement.
    """
    cfg = inst.config
    dtype = cfg.dtype
    threads = cfg.resolved_threads()
    src_tree, tgt_tree = inst.source_tree, inst.target_tree
    exp = inst.expansions
    n_e, n_c = exp.n_equiv, exp.n_check

    q_in = np.asarray(charges)
    q = kernel.as_charge_matrix(q_in, src_tree.n_points).astype(np.float64)
    inst._last_charges = q
    n_rhs = q.shape[1]
    q_tree = np.ascontiguousarray(q[src_tree.perm], dtype=dtype)

    timings = {name: 0.0 for name in OPERATOR_NAMES}
    inst.m2l_calls = []

    # Upward pass.
    t0 = time.perf_counter()
    depth = cfg.depth
    multipoles = [np.zeros((src_tree.level_keys(l).shape[0], n_rhs, n_e), dtype=dtype)
                  for l in range(depth + 1)]
    leaf_side = inst.domain.box_side(depth)
    leaves = src_tree.leaves
    n_leaves = leaves.shape[0]
    # Sibling-set boundaries: leaves are Morton sorted, so each set is a
    # contiguous run sharing a parent row; blocks span p2m_block sets.
    prow_leaf = inst._up_maps[depth][0]
    set_starts = np.flatnonzero(np.r_[True, prow_leaf[1:] != prow_leaf[:-1]])
    block_starts = np.r_[set_starts[::max(1, cfg.p2m_block)], n_leaves]
    for b0, b1 in zip(block_starts[:-1], block_starts[1:]):
        phi = np.empty((b1 - b0, n_rhs, n_c), dtype=dtype)
        for i in range(b0, b1):
            s0 = int(src_tree.leaf_starts[i])
            s1 = s0 + int(src_tree.leaf_counts[i])
            grid = inst._src_check[i]
            out = np.zeros((n_c, n_rhs), dtype=dtype)
            hotloops.laplace_potentials(
                np.ascontiguousarray(grid[:, 0]), np.ascontiguousarray(grid[:, 1]),
                np.ascontiguousarray(grid[:, 2]),
                inst._sx[s0:s1], inst._sy[s0:s1], inst._sz[s0:s1],
                q_tree[s0:s1], out, threads=threads)
            phi[i - b0] = out.T
        _solve_block(exp.up_inv, phi, leaf_side, slice(b0, b1), multipoles[depth])
    timings["p2m"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    for lvl in range(depth, 0, -1):
        prow, cidx = inst._up_maps[lvl]
        n_par = src_tree.level_keys(lvl - 1).shape[0]
        stacked = np.zeros((n_par, 8, n_e, n_rhs), dtype=dtype)
        stacked[prow, cidx] = multipoles[lvl].transpose(0, 2, 1)
        stacked = stacked.transpose(1, 2, 0, 3).reshape(8 * n_e, n_par * n_rhs)
        out = np.empty((n_e, n_par * n_rhs), dtype=dtype)
        step = max(1, cfg.m2m_block) * n_rhs
        for c0 in range(0, n_par * n_rhs, step):
            c1 = min(c0 + step, n_par * n_rhs)
            out[:, c0:c1] = exp.up_inv.apply(exp.m2m_kernels @ stacked[:, c0:c1])
        multipoles[lvl - 1][:] = out.reshape(n_e, n_par, n_rhs).transpose(1, 2, 0)
    timings["m2m"] = time.perf_counter() - t0
    inst.multipoles = multipoles

    # Downward pass.
    locals_ = [np.zeros((tgt_tree.level_keys(l).shape[0], n_rhs, n_e), dtype=dtype)
               for l in range(depth + 1)]
    strategy = cfg.resolved_m2l_strategy()
    for lvl in range(2, depth + 1):
        t0 = time.perf_counter()
        side = inst.domain.box_side(lvl)
        n_tgt = tgt_tree.level_keys(lvl).shape[0]
        if cfg.backend == "blas":
            check = m2l_blas.apply_level(
                inst.blas_ops, inst.buckets[lvl], multipoles[lvl], n_tgt,
                level_scale=1.0 / side, counter=inst.m2l_calls,
                strategy=strategy, threads=threads)
        else:
            check = m2l_fft.m2l_fft_level(
                inst.fft_ops, inst.halo_plans[lvl], multipoles[lvl],
                level_scale=1.0 / side, block_size=cfg.block_size,
                threads=threads)
        _solve_block(exp.down_inv, check, side, slice(None), locals_[lvl])
        timings["m2l"] += time.perf_counter() - t0

        if lvl < depth:
            t0 = time.perf_counter()
            prow, cidx = inst._down_maps[lvl + 1]
            n_par = locals_[lvl].shape[0]
            x = locals_[lvl].reshape(n_par * n_rhs, n_e).T
            y = np.empty((8 * n_e, n_par * n_rhs), dtype=dtype)
            step = max(1, cfg.m2m_block) * n_rhs
            for c0 in range(0, n_par * n_rhs, step):
                c1 = min(c0 + step, n_par * n_rhs)
                w = c1 - c0
                phi = (exp.l2l_kernels @ x[:, c0:c1]).reshape(8, n_c, w)
                phi = phi.transpose(1, 0, 2).reshape(n_c, 8 * w)
                sol = exp.down_inv.apply(phi, scale=0.5)
                y[:, c0:c1] = sol.reshape(n_e, 8, w).transpose(1, 0, 2).reshape(8 * n_e, w)
            y = y.reshape(8, n_e, n_par, n_rhs)
            locals_[lvl + 1][:] += y[cidx, :, prow, :].transpose(0, 2, 1)
            timings["l2l"] += time.perf_counter() - t0
    inst.locals_ = locals_

    # Leaf passes.
    potentials = np.zeros((tgt_tree.n_points, n_rhs), dtype=dtype)
    t0 = time.perf_counter()
    for i, code in enumerate(tgt_tree.leaves):
        s0 = int(tgt_tree.leaf_starts[i])
        s1 = s0 + int(tgt_tree.leaf_counts[i])
        grid = inst._tgt_equiv[i]
        k = hotloops.laplace_matrix(
            inst._tx[s0:s1], inst._ty[s0:s1], inst._tz[s0:s1],
            np.ascontiguousarray(grid[:, 0]), np.ascontiguousarray(grid[:, 1]),
            np.ascontiguousarray(grid[:, 2]), threads=threads)
        potentials[s0:s1] = k @ locals_[depth][i].T
    timings["l2p"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    q_near = np.ascontiguousarray(q_tree[inst._near_idx])
    hotloops.p2p_blocked(inst._tx, inst._ty, inst._tz, inst._leaf_of_target,
                         inst._near_sx, inst._near_sy, inst._near_sz,
                         q_near, inst._near_offsets, potentials,
                         threads=threads)
    timings["p2p"] = time.perf_counter() - t0

    inst.timings = timings
    out = np.empty_like(potentials)
    out[tgt_tree.perm] = potentials
    if q_in.ndim == 1 and n_rhs == 1:
        return out[:, 0]
    return out


def attach_charges(inst: FmmInstance, charges) -> np.ndarray:
    """Re-evaluate with new charges; no part of setup is repeated."""
    return evaluate(inst, charges)


def relative_error(inst: FmmInstance, potentials, leaf=None) -> ErrorStats:
    """Mean relative error over one leaf's targets against the full direct
    sum computed in double precision.

    Defaults to the most populated target leaf (smallest Morton code on a
    tie). With several right-hand sides the largest per-RHS mean is
    returned. Targets whose direct potential is exactly zero are excluded
    and counted.
    """
    tgt_tree = inst.target_tree
    if inst._last_charges is None:
        raise RuntimeError("evaluate must run before relative_error")
    if leaf is None:
        i = int(np.argmax(tgt_tree.leaf_counts))
        code = tgt_tree.leaves[i]
    else:
        code = leaf.code if isinstance(leaf, MortonKey) else int(leaf)
    sl = tgt_tree.leaf_slice(code)
    rows_tree = np.arange(sl.start, sl.stop)
    rows_orig = tgt_tree.perm[rows_tree]

    targets = np.stack([tgt_tree.x[rows_tree], tgt_tree.y[rows_tree],
                        tgt_tree.z[rows_tree]], axis=1)
    src = np.stack([inst.source_tree.x, inst.source_tree.y,
                    inst.source_tree.z], axis=1)
    q_tree = inst._last_charges[inst.source_tree.perm]
    ref = kernel.direct_potentials(src, q_tree, targets, dtype=np.float64,
                                   threads=inst.config.resolved_threads())
    ref = ref.reshape(targets.shape[0], -1)

    pot = np.asarray(potentials, dtype=np.float64)
    pot = pot.reshape(tgt_tree.n_points, -1)[rows_orig]

    nonzero = ref != 0
    n_excluded = int(ref.shape[0] * ref.shape[1] - np.count_nonzero(nonzero))
    rel = np.zeros_like(ref)
    rel[nonzero] = np.abs(pot[nonzero] - ref[nonzero]) / np.abs(ref[nonzero])
    per_rhs = np.array([rel[nonzero[:, r], r].mean() if nonzero[:, r].any() else 0.0
                        for r in range(ref.shape[1])])
    return ErrorStats(error=float(per_rhs.max()), n_excluded=n_excluded)


def operator_timings(inst: FmmInstance) -> dict:
    """Wall-clock seconds per operator class of the last evaluation, plus
    setup; the field-translation entry includes the check-to-local solve."""
    out = {name: inst.timings.get(name, 0.0) for name in OPERATOR_NAMES}
    out["setup"] = inst.setup_seconds
    return out
