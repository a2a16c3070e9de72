"""Morton-keyed octree over a cubic domain.

A key packs the interleaved anchor bits (x highest) above a 5-bit level
field, so keys at one level sort in Morton order and the 8 children of any
box occupy a contiguous, sorted code range. The tree is adaptive only in
the sense that empty branches are pruned: every retained box at the leaf
level holds at least one point and every ancestor of a retained box is
retained.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_DEPTH = 16
LEVEL_BITS = 5
_LEVEL_MASK = (1 << LEVEL_BITS) - 1

# Relative margin added to the tight bounding cube so that points sitting
# exactly on the upper faces still encode inside the last box row.
DOMAIN_MARGIN = 1e-5


class DomainError(ValueError):
    """A point lies outside the tree domain."""


class LevelError(ValueError):
    """A key operation was asked for at an invalid level."""


class AdmissibilityError(ValueError):
    """The box pair is not a far-field (interaction list) pair."""


# --- bit interleaving -------------------------------------------------------

_U = np.uint64


def _spread(v):
    """Space the low 16 bits of ``v`` three apart (vectorized, uint64)."""
    v = v.astype(_U)
    v = (v | (v << 32)) & _U(0x1F00000000FFFF)
    v = (v | (v << 16)) & _U(0x1F0000FF0000FF)
    v = (v | (v << 8)) & _U(0x100F00F00F00F00F)
    v = (v | (v << 4)) & _U(0x10C30C30C30C30C3)
    v = (v | (v << 2)) & _U(0x1249249249249249)
    return v


def _compact(v):
    """Inverse of ``_spread``: collect every third bit into the low 16."""
    v = v & _U(0x1249249249249249)
    v = (v ^ (v >> 2)) & _U(0x10C30C30C30C30C3)
    v = (v ^ (v >> 4)) & _U(0x100F00F00F00F00F)
    v = (v ^ (v >> 8)) & _U(0x1F0000FF0000FF)
    v = (v ^ (v >> 16)) & _U(0x1F00000000FFFF)
    v = (v ^ (v >> 32)) & _U(0xFFFF)
    return v


def encode_anchors(anchors, level):
    """Morton codes for integer anchors (n, 3) at ``level``."""
    a = np.asarray(anchors, dtype=np.int64).reshape(-1, 3).astype(np.uint64)
    interleaved = (_spread(a[:, 0]) << _U(2)) | (_spread(a[:, 1]) << _U(1)) | _spread(a[:, 2])
    return (interleaved << _U(LEVEL_BITS)) | _U(level)


def decode_codes(codes):
    """Anchors (n, 3) int64 and levels (n,) int64 for an array of codes."""
    c = np.asarray(codes, dtype=np.uint64)
    levels = (c & _U(_LEVEL_MASK)).astype(np.int64)
    interleaved = c >> _U(LEVEL_BITS)
    x = _compact(interleaved >> _U(2)).astype(np.int64)
    y = _compact(interleaved >> _U(1)).astype(np.int64)
    z = _compact(interleaved).astype(np.int64)
    return np.stack([x, y, z], axis=1), levels


def parent_codes(codes):
    c = np.asarray(codes, dtype=np.uint64)
    levels = c & _U(_LEVEL_MASK)
    return ((c >> _U(LEVEL_BITS + 3)) << _U(LEVEL_BITS)) | (levels - _U(1))


def child_index_codes(codes):
    """Position of each box among its siblings, in [0, 8)."""
    c = np.asarray(codes, dtype=np.uint64)
    return ((c >> _U(LEVEL_BITS)) & _U(7)).astype(np.int64)


# --- keys -------------------------------------------------------------------


@dataclass(frozen=True)
class MortonKey:
    """One octree box: integer anchor (lower corner, in box units) + level."""

    anchor: tuple[int, int, int]
    level: int

    def __post_init__(self):
        if not 0 <= self.level <= MAX_DEPTH:
            raise LevelError(f"level {self.level} outside [0, {MAX_DEPTH}]")
        n = 1 << self.level
        if any(not 0 <= a < n for a in self.anchor):
            raise DomainError(f"anchor {self.anchor} outside level-{self.level} grid")
        object.__setattr__(self, "anchor", tuple(int(a) for a in self.anchor))

    @property
    def code(self) -> int:
        return int(encode_anchors(np.array([self.anchor]), self.level)[0])

    @classmethod
    def from_code(cls, code) -> "MortonKey":
        anchors, levels = decode_codes(np.array([code], dtype=np.uint64))
        return cls(tuple(int(v) for v in anchors[0]), int(levels[0]))

    @classmethod
    def root(cls) -> "MortonKey":
        return cls((0, 0, 0), 0)

    def parent(self) -> "MortonKey":
        if self.level == 0:
            raise LevelError("the root has no parent")
        return MortonKey(tuple(a >> 1 for a in self.anchor), self.level - 1)

    def children(self) -> list["MortonKey"]:
        if self.level >= MAX_DEPTH:
            raise LevelError("cannot refine below the maximum depth")
        x, y, z = (a << 1 for a in self.anchor)
        return [MortonKey((x + (i >> 2), y + ((i >> 1) & 1), z + (i & 1)), self.level + 1)
                for i in range(8)]

    def siblings(self) -> list["MortonKey"]:
        if self.level == 0:
            return [self]
        return self.parent().children()

    def child_index(self) -> int:
        """Position among siblings; equals the low 3 interleaved bits."""
        return ((self.anchor[0] & 1) << 2) | ((self.anchor[1] & 1) << 1) | (self.anchor[2] & 1)

    def __lt__(self, other: "MortonKey") -> bool:
        return self.code < other.code


def neighbors(key: MortonKey) -> list[MortonKey]:
    """Face/edge/corner adjacent boxes at the same level, Morton sorted."""
    n = 1 << key.level
    out = []
    for off in itertools.product((-1, 0, 1), repeat=3):
        if off == (0, 0, 0):
            continue
        cand = tuple(a + o for a, o in zip(key.anchor, off))
        if all(0 <= c < n for c in cand):
            out.append(MortonKey(cand, key.level))
    return sorted(out)


def interaction_list(key: MortonKey) -> list[MortonKey]:
    """Children of the parent's neighbors that are not adjacent to ``key``.

    Empty below level 2: at levels 0 and 1 every same-level box is either
    the box itself or one of its neighbors.
    """
    if key.level < 2:
        return []
    out = []
    for pn in neighbors(key.parent()):
        for child in pn.children():
            d = max(abs(c - a) for c, a in zip(child.anchor, key.anchor))
            if d >= 2:
                out.append(child)
    return sorted(out)


@dataclass(frozen=True)
class TransferVector:
    """Anchor offset (source minus target) of a far-field pair at one level."""

    offset: tuple[int, int, int]

    def __post_init__(self):
        off = tuple(int(o) for o in self.offset)
        cheb = max(abs(o) for o in off)
        if cheb < 2 or cheb > 3:
            raise AdmissibilityError(f"offset {off} is not a far-field separation")
        object.__setattr__(self, "offset", off)


def transfer_vector(source: MortonKey, target: MortonKey) -> TransferVector:
    """Transfer vector of an admissible same-level pair."""
    if source.level != target.level:
        raise AdmissibilityError("source and target must sit at the same level")
    off = tuple(s - t for s, t in zip(source.anchor, target.anchor))
    if max(abs(o) for o in off) < 2:
        raise AdmissibilityError(f"{off}: boxes are adjacent or identical")
    pdist = max(abs((s >> 1) - (t >> 1)) for s, t in zip(source.anchor, target.anchor))
    if pdist > 1:
        raise AdmissibilityError(f"{off}: parents are not adjacent")
    return TransferVector(off)


@lru_cache(maxsize=1)
def all_transfer_vectors() -> tuple[TransferVector, ...]:
    """The 316 possible transfer vectors, in lexicographic offset order."""
    out = [TransferVector(off)
           for off in itertools.product(range(-3, 4), repeat=3)
           if max(abs(o) for o in off) >= 2]
    return tuple(out)


@lru_cache(maxsize=1)
def transfer_vector_index() -> dict[tuple[int, int, int], int]:
    return {tv.offset: i for i, tv in enumerate(all_transfer_vectors())}


@lru_cache(maxsize=1)
def halo_offsets() -> tuple[tuple[int, int, int], ...]:
    """The 26 parent-neighbor offsets, in lexicographic order."""
    return tuple(off for off in itertools.product((-1, 0, 1), repeat=3)
                 if off != (0, 0, 0))


def halo_clusters(parent: MortonKey) -> list[tuple[tuple[int, int, int], MortonKey | None]]:
    """(offset, neighbor key) per halo slot; None where the offset leaves
    the domain, so cluster consumers can zero-fill absent slots."""
    n = 1 << parent.level
    out = []
    for off in halo_offsets():
        cand = tuple(a + o for a, o in zip(parent.anchor, off))
        if all(0 <= c < n for c in cand):
            out.append((off, MortonKey(cand, parent.level)))
        else:
            out.append((off, None))
    return out


# --- domain and tree --------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    """Axis-aligned cube containing every point of both trees."""

    origin: tuple[float, float, float]
    side: float

    @classmethod
    def from_points(cls, points, margin: float = DOMAIN_MARGIN) -> "Domain":
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo = p.min(axis=0)
        hi = p.max(axis=0)
        extent = float((hi - lo).max())
        side = extent * (1.0 + margin) if extent > 0 else 1.0
        center = (lo + hi) / 2.0
        origin = center - side / 2.0
        return cls(tuple(float(v) for v in origin), side)

    def box_side(self, level: int) -> float:
        return self.side / (1 << level)

    def box_center(self, key: MortonKey) -> np.ndarray:
        h = self.box_side(key.level)
        return np.asarray(self.origin, dtype=np.float64) + (np.asarray(key.anchor) + 0.5) * h


def encode_points(points, depth: int, domain: Domain):
    """Leaf-level Morton codes for ``points``; raises on out-of-domain input.

    Points on the upper domain faces land in the last box row (the anchor
    grid is half-open but the domain is closed above).
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    origin = np.asarray(domain.origin, dtype=np.float64)
    frac = (p - origin) / domain.side
    if np.any(frac < 0) or np.any(frac > 1):
        bad = int(np.argmax(np.any((frac < 0) | (frac > 1), axis=1)))
        raise DomainError(f"point {p[bad]} lies outside the domain")
    n = 1 << depth
    anchors = np.minimum((frac * n).astype(np.int64), n - 1)
    return encode_anchors(anchors, depth)


def encode_point(point, depth: int, domain: Domain) -> MortonKey:
    code = encode_points(np.asarray(point, dtype=np.float64).reshape(1, 3), depth, domain)[0]
    return MortonKey.from_code(code)


class Octree:
    """Pruned octree over one point set.

    Points are stored permuted into leaf-Morton order as structure-of-arrays
    coordinates; ``perm`` maps a sorted position back to the caller's index.
    """

    def __init__(self, points, depth: int, domain: Domain | None = None):
        p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if p.shape[0] < 1:
            raise ValueError("a tree needs at least one point")
        if not 1 <= depth <= MAX_DEPTH:
            raise LevelError(f"depth {depth} outside [1, {MAX_DEPTH}]")
        self.depth = depth
        self.domain = domain if domain is not None else Domain.from_points(p)

        codes = encode_points(p, depth, self.domain)
        order = np.argsort(codes, kind="stable")
        self.perm = order
        sorted_codes = codes[order]
        self.x = np.ascontiguousarray(p[order, 0])
        self.y = np.ascontiguousarray(p[order, 1])
        self.z = np.ascontiguousarray(p[order, 2])
        self.n_points = p.shape[0]

        leaf_codes, starts, counts = np.unique(sorted_codes, return_index=True,
                                               return_counts=True)
        self.levels: list[np.ndarray] = [None] * (depth + 1)  # type: ignore[list-item]
        self.levels[depth] = leaf_codes
        for lvl in range(depth - 1, -1, -1):
            self.levels[lvl] = np.unique(parent_codes(self.levels[lvl + 1]))
        self.leaf_starts = starts.astype(np.int64)
        self.leaf_counts = counts.astype(np.int64)
        self._leaf_pos = {int(c): i for i, c in enumerate(leaf_codes)}

    @property
    def leaves(self) -> np.ndarray:
        return self.levels[self.depth]

    def level_keys(self, level: int) -> np.ndarray:
        if not 0 <= level <= self.depth:
            raise LevelError(f"level {level} outside [0, {self.depth}]")
        return self.levels[level]

    def key_position(self, code, level: int) -> int:
        """Row of ``code`` in the sorted level array; -1 when pruned."""
        arr = self.levels[level]
        i = int(np.searchsorted(arr, np.uint64(code)))
        if i < arr.shape[0] and arr[i] == np.uint64(code):
            return i
        return -1

    def leaf_slice(self, code) -> slice:
        i = self._leaf_pos[int(code)]
        s = int(self.leaf_starts[i])
        return slice(s, s + int(self.leaf_counts[i]))

    def points_in_leaf(self, code) -> np.ndarray:
        sl = self.leaf_slice(code)
        return np.stack([self.x[sl], self.y[sl], self.z[sl]], axis=1)


def build_tree(points, depth: int, domain: Domain | None = None) -> Octree:
    return Octree(points, depth, domain)
