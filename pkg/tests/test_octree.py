import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kifmm3d import octree
from kifmm3d.octree import (AdmissibilityError, Domain, DomainError, LevelError,
                            MortonKey, Octree, TransferVector,
                            all_transfer_vectors, build_tree,
                            child_index_codes, decode_codes, encode_anchors,
                            encode_point, encode_points, halo_clusters,
                            halo_offsets, interaction_list, neighbors,
                            parent_codes, transfer_vector,
                            transfer_vector_index)
from conftest import uniform_points


@st.composite
def anchored_key(draw, max_level=8):
    level = draw(st.integers(min_value=0, max_value=max_level))
    n = 1 << level
    anchor = tuple(draw(st.integers(min_value=0, max_value=n - 1))
                   for _ in range(3))
    return MortonKey(anchor, level)


@given(anchored_key())
@settings(max_examples=150, deadline=None)
def test_code_roundtrip(key):
    assert MortonKey.from_code(key.code) == key


@given(anchored_key(max_level=octree.MAX_DEPTH))
@settings(max_examples=100, deadline=None)
def test_roundtrip_at_any_depth(key):
    assert MortonKey.from_code(key.code) == key


def test_vectorized_encode_decode():
    rng = np.random.default_rng(0)
    anchors = rng.integers(0, 16, size=(200, 3))
    codes = encode_anchors(anchors, 4)
    back, levels = decode_codes(codes)
    assert np.array_equal(back, anchors)
    assert np.all(levels == 4)


def test_morton_order_groups_siblings():
    # Children of one parent occupy a contiguous sorted code range.
    parent = MortonKey((1, 2, 3), 3)
    codes = [c.code for c in parent.children()]
    assert codes == sorted(codes)
    assert codes[-1] - codes[0] == 7 << octree.LEVEL_BITS


def test_parent_child_roundtrip():
    key = MortonKey((5, 0, 7), 3)
    kids = key.children()
    assert len(kids) == 8
    for i, child in enumerate(kids):
        assert child.parent() == key
        assert child.child_index() == i
    assert np.all(parent_codes([c.code for c in kids])
                  == np.uint64(key.code))
    assert np.array_equal(child_index_codes([c.code for c in kids]),
                          np.arange(8))


def test_child_index_bit_convention():
    # x occupies the high bit of the sibling index, z the low bit.
    parent = MortonKey((0, 0, 0), 0)
    kids = parent.children()
    assert kids[4].anchor == (1, 0, 0)
    assert kids[1].anchor == (0, 0, 1)
    assert kids[2].anchor == (0, 1, 0)


def test_siblings():
    key = MortonKey((4, 4, 5), 3)
    sibs = key.siblings()
    assert len(sibs) == 8
    assert key in sibs
    assert MortonKey.root().siblings() == [MortonKey.root()]


def test_key_validation():
    with pytest.raises(LevelError):
        MortonKey((0, 0, 0), octree.MAX_DEPTH + 1)
    with pytest.raises(DomainError):
        MortonKey((2, 0, 0), 1)
    with pytest.raises(LevelError):
        MortonKey.root().parent()
    with pytest.raises(LevelError):
        MortonKey((0, 0, 0), octree.MAX_DEPTH).children()


def test_neighbor_counts():
    interior = MortonKey((3, 3, 3), 3)
    assert len(neighbors(interior)) == 26
    corner = MortonKey((0, 0, 0), 3)
    assert len(neighbors(corner)) == 7
    face = MortonKey((0, 3, 3), 3)   # one face against the boundary
    assert len(neighbors(face)) == 17
    assert neighbors(MortonKey.root()) == []


@given(anchored_key(max_level=5))
@settings(max_examples=80, deadline=None)
def test_neighbors_are_adjacent_and_sorted(key):
    nbs = neighbors(key)
    assert nbs == sorted(nbs)
    assert len(set(nbs)) == len(nbs)
    for nb in nbs:
        assert nb.level == key.level
        assert max(abs(a - b) for a, b in zip(nb.anchor, key.anchor)) == 1


def test_interaction_list_empty_below_level_two():
    assert interaction_list(MortonKey.root()) == []
    assert interaction_list(MortonKey((1, 0, 1), 1)) == []


def test_interaction_list_interior_size():
    # A child of an interior parent sees all 27 * 8 cousins minus the 26
    # neighbors and itself.
    box = MortonKey((2, 2, 2), 3)
    lst = interaction_list(box)
    assert len(lst) == 189
    sizes = [len(interaction_list(MortonKey((x, y, z), 3)))
             for x in range(8) for y in range(8) for z in range(8)]
    assert max(sizes) == 189


def test_interaction_list_members_are_admissible():
    box = MortonKey((2, 3, 2), 3)
    lst = interaction_list(box)
    assert lst == sorted(lst)
    parent = box.parent()
    for src in lst:
        assert src.level == box.level
        d = max(abs(s - t) for s, t in zip(src.anchor, box.anchor))
        assert d >= 2
        pd = max(abs(s - t) for s, t in zip(src.parent().anchor, parent.anchor))
        assert pd <= 1
        # Round trip through the pair classifier.
        tv = transfer_vector(src, box)
        assert tv.offset == tuple(s - t for s, t in zip(src.anchor, box.anchor))


def test_transfer_vector_rejections():
    a = MortonKey((0, 0, 0), 3)
    with pytest.raises(AdmissibilityError):
        transfer_vector(MortonKey((1, 0, 0), 3), a)        # adjacent
    with pytest.raises(AdmissibilityError):
        transfer_vector(a, a)                              # identical
    with pytest.raises(AdmissibilityError):
        transfer_vector(MortonKey((4, 0, 0), 3), a)        # parents apart
    with pytest.raises(AdmissibilityError):
        transfer_vector(MortonKey((2, 0, 0), 2), a)        # level mismatch
    with pytest.raises(AdmissibilityError):
        TransferVector((1, 1, 1))
    with pytest.raises(AdmissibilityError):
        TransferVector((4, 0, 0))


def test_all_transfer_vectors():
    tvs = all_transfer_vectors()
    assert len(tvs) == 316
    offs = [tv.offset for tv in tvs]
    assert len(set(offs)) == 316
    assert offs == sorted(offs)          # lexicographic
    for off in offs:
        assert 2 <= max(abs(o) for o in off) <= 3
    idx = transfer_vector_index()
    assert all(idx[off] == i for i, off in enumerate(offs))


def test_transfer_vectors_close_under_negation():
    offs = {tv.offset for tv in all_transfer_vectors()}
    assert all(tuple(-o for o in off) in offs for off in offs)


def test_halo_offsets():
    offs = halo_offsets()
    assert len(offs) == 26
    assert list(offs) == sorted(offs)
    assert (0, 0, 0) not in offs


def test_halo_clusters():
    interior = MortonKey((1, 1, 1), 2)
    clusters = halo_clusters(interior)
    assert len(clusters) == 26
    assert all(key is not None for _, key in clusters)
    for off, key in clusters:
        assert key.anchor == tuple(a + o for a, o in zip(interior.anchor, off))
    corner = MortonKey((0, 0, 0), 2)
    kinds = [key for _, key in halo_clusters(corner)]
    assert sum(1 for k in kinds if k is not None) == 7


def test_domain_from_points():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 0.5]])
    dom = Domain.from_points(pts)
    assert dom.side == pytest.approx(2.0 * (1 + octree.DOMAIN_MARGIN))
    lo = np.asarray(dom.origin)
    assert np.all(pts >= lo - 1e-12)
    assert np.all(pts <= lo + dom.side + 1e-12)
    # A degenerate cloud still gets a usable cube.
    assert Domain.from_points(np.ones((3, 3))).side == 1.0


def test_box_geometry():
    dom = Domain(origin=(0.0, 0.0, 0.0), side=1.0)
    assert dom.box_side(3) == 0.125
    c = dom.box_center(MortonKey((0, 0, 0), 1))
    assert np.allclose(c, [0.25, 0.25, 0.25])
    c = dom.box_center(MortonKey((7, 0, 3), 3))
    assert np.allclose(c, [0.9375, 0.0625, 0.4375])


def test_encode_points_clamps_upper_faces():
    dom = Domain(origin=(0.0, 0.0, 0.0), side=1.0)
    key = encode_point((1.0, 1.0, 1.0), 3, dom)
    assert key.anchor == (7, 7, 7)
    with pytest.raises(DomainError):
        encode_points(np.array([[1.0, 1.0, 1.5]]), 3, dom)
    with pytest.raises(DomainError):
        encode_points(np.array([[-0.1, 0.0, 0.0]]), 3, dom)


@given(st.integers(min_value=1, max_value=6),
       st.lists(st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
                min_size=3, max_size=3))
@settings(max_examples=80, deadline=None)
def test_encode_point_matches_anchor_arithmetic(depth, coords):
    dom = Domain(origin=(0.0, 0.0, 0.0), side=1.0)
    key = encode_point(coords, depth, dom)
    n = 1 << depth
    expect = tuple(min(int(c * n), n - 1) for c in coords)
    assert key.anchor == expect
    assert key.level == depth


def test_tree_permutation_and_leaf_slices():
    pts = uniform_points(500, seed=1)
    tree = Octree(pts, 3)
    assert tree.n_points == 500
    assert np.array_equal(np.sort(tree.perm), np.arange(500))
    # Sorted coordinates recover the input through the permutation.
    assert np.allclose(tree.x, pts[tree.perm, 0])
    total = 0
    for code in tree.leaves:
        sl = tree.leaf_slice(code)
        total += sl.stop - sl.start
        # Every point of the slice encodes to this leaf.
        inside = tree.points_in_leaf(code)
        got = encode_points(inside, 3, tree.domain)
        assert np.all(got == np.uint64(code))
    assert total == 500
    assert int(tree.leaf_counts.sum()) == 500


def test_tree_levels_are_pruned_ancestors():
    pts = uniform_points(300, seed=2)
    tree = Octree(pts, 4)
    assert tree.levels[0].shape[0] == 1         # the root
    for lvl in range(1, 5):
        codes = tree.level_keys(lvl)
        assert np.array_equal(codes, np.sort(codes))
        assert np.array_equal(codes, np.unique(codes))
        parents = np.unique(parent_codes(codes))
        assert np.array_equal(parents, tree.level_keys(lvl - 1))


def test_uniform_cloud_fills_depth_three():
    tree = Octree(uniform_points(10000, seed=3), 3)
    assert tree.leaves.shape[0] == 512


def test_sphere_cloud_prunes_center():
    rng = np.random.default_rng(4)
    v = rng.standard_normal((4000, 3))
    pts = v / np.linalg.norm(v, axis=1)[:, None]
    tree = Octree(pts, 3)
    assert tree.leaves.shape[0] < 512
    # The box containing the origin holds no surface point.
    center_code = encode_points(np.zeros((1, 3)), 3, tree.domain)[0]
    assert tree.key_position(center_code, 3) == -1


def test_key_position():
    tree = Octree(uniform_points(1000, seed=5), 2)
    for i, code in enumerate(tree.leaves):
        assert tree.key_position(code, 2) == i


def test_tree_argument_validation():
    with pytest.raises(ValueError):
        Octree(np.empty((0, 3)), 2)
    with pytest.raises(LevelError):
        Octree(np.ones((4, 3)), 0)
    tree = build_tree(uniform_points(50, seed=6), 2)
    with pytest.raises(LevelError):
        tree.level_keys(3)


def test_points_in_leaf_against_brute_force():
    pts = uniform_points(400, seed=7)
    tree = Octree(pts, 2)
    codes = encode_points(pts, 2, tree.domain)
    for code in tree.leaves[:10]:
        mine = tree.points_in_leaf(code)
        want = pts[codes == code]
        assert mine.shape == want.shape
        a = mine[np.lexsort(mine.T)]
        b = want[np.lexsort(want.T)]
        assert np.array_equal(a, b)
