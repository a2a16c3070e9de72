"""Equivalent-density expansions on cube surface grids.

A box is represented by charge densities on a lattice covering its cube
surface. Densities are recovered from potentials on a second (check)
surface through a Tikhonov-regularized pseudo-inverse, realized as a
filtered SVD. Upward operators use an inner equivalent surface (scale
1.05 of the box side) and an outer check surface (scale 2.95); downward
operators swap the two. The outer surface sits at the distance where
non-adjacent boxes start, so the fit happens where the field is used;
pulling it closer costs one to two digits at every order.

Reference operators are assembled once on a unit box. The kernel is
homogeneous of degree -1, so the pseudo-inverse at box side ``d`` is ``d``
times the unit one, and the child-to-parent (and parent-to-child)
translation chains are the same at every level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernel
from .octree import MortonKey, Octree, neighbors

INNER_SCALE = 1.05
OUTER_SCALE = 2.95

# Relative singular-value cutoff of the pseudo-inverse when none is given.
DEFAULT_CUTOFF_EPS_FACTOR = 10.0


def boundary_lattice(order: int) -> np.ndarray:
    """Integer lattice points on the surface of the [0, order-1]^3 cube,
    in lexicographic order. Row count is 6*(order-1)^2 + 2."""
    if order < 2:
        raise ValueError("surface order must be at least 2")
    idx = np.arange(order)
    grid = np.stack(np.meshgrid(idx, idx, idx, indexing="ij"), axis=-1).reshape(-1, 3)
    on_face = np.any((grid == 0) | (grid == order - 1), axis=1)
    return grid[on_face]


def surface(order: int, center, side: float, scale: float,
            dtype=np.float64) -> np.ndarray:
    """Surface grid points of a box: the boundary lattice mapped onto a cube
    of side ``scale * side`` centered at ``center``."""
    lat = boundary_lattice(order).astype(np.float64)
    rel = lat / (order - 1) - 0.5
    pts = np.asarray(center, dtype=np.float64) + rel * (scale * side)
    return np.ascontiguousarray(pts, dtype=dtype)


def n_surface(order: int) -> int:
    return 6 * (order - 1) ** 2 + 2


@dataclass
class RegularizedInverse:
    """Filtered-SVD pseudo-inverse of a kernel matrix.

    Solves K q = phi as q = V diag(s / (s^2 + alpha)) U^T phi, keeping the
    singular values at or above ``cutoff`` relative to the largest.
    """

    u: np.ndarray          # (n_rows, rank)
    inv_vals: np.ndarray   # (rank,) filtered inverse singular values
    v: np.ndarray          # (n_cols, rank)
    alpha: float
    cutoff: float
    _matrix: np.ndarray | None = field(default=None, repr=False)

    @property
    def rank(self) -> int:
        return int(self.inv_vals.shape[0])

    def apply(self, phi: np.ndarray, scale: float = 1.0) -> np.ndarray:
        """q = scale * pinv(K) phi for a vector or a column block."""
        if phi.ndim == 1:
            return self.v @ (self.inv_vals * (self.u.T @ phi)) * scale
        return (self.v @ (self.inv_vals[:, None] * (self.u.T @ phi))) * scale

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = self.v @ (self.inv_vals[:, None] * self.u.T)
        return self._matrix


def tikhonov_pinv(k: np.ndarray, alpha: float = 0.0,
                  cutoff: float | None = None) -> RegularizedInverse:
    """Regularized pseudo-inverse of a dense kernel matrix.

    ``cutoff`` is relative to the largest singular value; when omitted it
    defaults to 10 machine epsilons of the matrix dtype.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if cutoff is None:
        cutoff = DEFAULT_CUTOFF_EPS_FACTOR * float(np.finfo(k.dtype).eps)
    u, s, vt = np.linalg.svd(k, full_matrices=False)
    if s.shape[0] and s[0] > 0:
        keep = s >= cutoff * s[0]
    else:
        keep = np.zeros(s.shape, dtype=bool)
    u = np.ascontiguousarray(u[:, keep])
    s = s[keep]
    vals = (s / (s * s + k.dtype.type(alpha))).astype(k.dtype)
    return RegularizedInverse(u=u, inv_vals=vals, v=np.ascontiguousarray(vt[keep].T),
                              alpha=float(alpha), cutoff=float(cutoff))


def _child_centers() -> np.ndarray:
    """Centers of the 8 children of a unit box at the origin, indexed like
    MortonKey.child_index (x bit highest, z fastest)."""
    out = np.empty((8, 3))
    for i in range(8):
        d = np.array([(i >> 2) & 1, (i >> 1) & 1, i & 1], dtype=np.float64)
        out[i] = (d - 0.5) / 2.0
    return out


class ExpansionOperators:
    """Reference surface operators shared by both field-translation back ends.

    All matrices are assembled on a unit box at the origin in the working
    dtype; per-level scaling is a scalar applied by the caller.
    """

    def __init__(self, order_equiv: int, order_check: int | None = None,
                 dtype=np.float64, alpha: float = 0.0,
                 cutoff: float | None = None,
                 inner_scale: float = INNER_SCALE,
                 outer_scale: float = OUTER_SCALE):
        if order_check is None:
            order_check = order_equiv
        if order_check < order_equiv:
            raise ValueError("check order must be at least the equivalent order")
        self.order_equiv = order_equiv
        self.order_check = order_check
        self.dtype = np.dtype(dtype)
        self.alpha = alpha
        self.inner_scale = inner_scale
        self.outer_scale = outer_scale
        self.n_equiv = n_surface(order_equiv)
        self.n_check = n_surface(order_check)

        origin = np.zeros(3)
        dt = self.dtype
        self.up_equiv = surface(order_equiv, origin, 1.0, inner_scale, dt)
        self.up_check = surface(order_check, origin, 1.0, outer_scale, dt)
        self.down_equiv = surface(order_equiv, origin, 1.0, outer_scale, dt)
        self.down_check = surface(order_check, origin, 1.0, inner_scale, dt)

        self.up_inv = tikhonov_pinv(
            kernel.assemble_matrix(self.up_equiv, self.up_check, dtype=dt),
            alpha=alpha, cutoff=cutoff)
        self.down_inv = tikhonov_pinv(
            kernel.assemble_matrix(self.down_equiv, self.down_check, dtype=dt),
            alpha=alpha, cutoff=cutoff)

        # Child translation matrices stay separate from the pseudo-inverse:
        # composing them would smear the 1/sigma amplification across all
        # directions, where the forward operator no longer attenuates it.
        # The factored chain (kernel product, then SVD solve) keeps that
        # noise inside the weak subspace.
        child_centers = _child_centers()
        m2m_blocks = []
        l2l_blocks = []
        for i in range(8):
            child_ue = surface(order_equiv, child_centers[i], 0.5, inner_scale, dt)
            m2m_blocks.append(kernel.assemble_matrix(child_ue, self.up_check,
                                                     dtype=dt))
            child_dc = surface(order_check, child_centers[i], 0.5, inner_scale, dt)
            l2l_blocks.append(kernel.assemble_matrix(self.down_equiv, child_dc,
                                                     dtype=dt))
        self.m2m_kernels = np.ascontiguousarray(np.hstack(m2m_blocks))  # (n_c, 8 n_e)
        self.l2l_kernels = np.ascontiguousarray(np.vstack(l2l_blocks))  # (8 n_c, n_e)


# --- single-box operators ----------------------------------------------------
# The engine runs blocked versions of these loops; the per-box forms below
# define the semantics and serve as oracles.


def p2m(leaf: MortonKey, tree: Octree, charges, ops: ExpansionOperators,
        threads=None) -> np.ndarray:
    """Upward-equivalent densities of one leaf from its own points.

    ``charges`` follow the caller's point order, as in the engine.
    """
    pts = tree.points_in_leaf(leaf.code)
    sl = tree.leaf_slice(leaf.code)
    q = kernel.as_charge_matrix(np.asarray(charges), tree.n_points)[tree.perm][sl]
    side = tree.domain.box_side(leaf.level)
    check = surface(ops.order_check, tree.domain.box_center(leaf), side,
                    ops.outer_scale, ops.dtype)
    phi = kernel.direct_potentials(pts.astype(ops.dtype), q.astype(ops.dtype),
                                   check, dtype=ops.dtype, threads=threads)
    phi = phi.reshape(ops.n_check, -1)
    out = ops.up_inv.apply(phi, scale=side)
    return out if np.asarray(charges).ndim > 1 else out[:, 0]


def m2m(child_coefficients, ops: ExpansionOperators) -> np.ndarray:
    """Parent upward densities from up to 8 children.

    ``child_coefficients`` is a length-8 sequence indexed by child position;
    missing children are None. One blocked product against the horizontally
    stacked child matrices gives the parent check potentials, then the
    factored solve recovers the densities. Scale-free: the kernel product
    and the pseudo-inverse pick up inverse level factors.
    """
    cols = None
    for c in child_coefficients:
        if c is not None:
            cols = np.asarray(c).reshape(ops.n_equiv, -1).shape[1]
            break
    if cols is None:
        raise ValueError("at least one child must be present")
    stacked = np.zeros((8 * ops.n_equiv, cols), dtype=ops.dtype)
    for i, c in enumerate(child_coefficients):
        if c is not None:
            stacked[i * ops.n_equiv:(i + 1) * ops.n_equiv] = np.asarray(c).reshape(ops.n_equiv, cols)
    out = ops.up_inv.apply(ops.m2m_kernels @ stacked)
    first = next(c for c in child_coefficients if c is not None)
    return out if np.asarray(first).ndim > 1 else out[:, 0]


def l2l(parent_coefficients, ops: ExpansionOperators) -> np.ndarray:
    """Downward densities of the 8 children of one parent, child-major."""
    p = np.asarray(parent_coefficients)
    phi = ops.l2l_kernels @ p.reshape(ops.n_equiv, -1)     # (8 n_c, cols)
    cols = phi.shape[1]
    phi = phi.reshape(8, ops.n_check, cols).transpose(1, 0, 2).reshape(
        ops.n_check, 8 * cols)
    # Child boxes sit at half the parent side, hence the 0.5 on the solve.
    out = ops.down_inv.apply(phi, scale=0.5)
    out = out.reshape(ops.n_equiv, 8, cols).transpose(1, 0, 2)
    if p.ndim > 1:
        return out
    return out.reshape(8, ops.n_equiv)


def l2p(leaf_coefficients, leaf: MortonKey, tree: Octree,
        ops: ExpansionOperators, points=None) -> np.ndarray:
    """Far-field potentials at a leaf's own points (or at ``points``)."""
    if points is None:
        points = tree.points_in_leaf(leaf.code)
    side = tree.domain.box_side(leaf.level)
    equiv = surface(ops.order_equiv, tree.domain.box_center(leaf), side,
                    ops.outer_scale, ops.dtype)
    k = kernel.assemble_matrix(equiv, np.asarray(points, dtype=ops.dtype),
                               dtype=ops.dtype)
    c = np.asarray(leaf_coefficients)
    out = k @ c.reshape(ops.n_equiv, -1)
    return out if c.ndim > 1 else out[:, 0]


def p2p(target_leaf: MortonKey, tree: Octree, charges, dtype=np.float64,
        threads=None) -> np.ndarray:
    """Direct near-field potentials at a leaf's points: sources are the
    leaf itself plus its retained neighbor leaves. ``charges`` follow the
    caller's point order."""
    q = kernel.as_charge_matrix(np.asarray(charges), tree.n_points)[tree.perm]
    slices = []
    if tree.key_position(target_leaf.code, tree.depth) >= 0:
        slices.append(tree.leaf_slice(target_leaf.code))
    for nb in neighbors(target_leaf):
        if tree.key_position(nb.code, tree.depth) >= 0:
            slices.append(tree.leaf_slice(nb.code))
    targets = tree.points_in_leaf(target_leaf.code).astype(dtype)
    out = np.zeros((targets.shape[0], q.shape[1]), dtype=dtype)
    for sl in slices:
        src = np.stack([tree.x[sl], tree.y[sl], tree.z[sl]], axis=1)
        kernel.direct_potentials(src.astype(dtype), q[sl].astype(dtype),
                                 targets, dtype=dtype, out=out, threads=threads)
    return out if np.asarray(charges).ndim > 1 else out[:, 0]
