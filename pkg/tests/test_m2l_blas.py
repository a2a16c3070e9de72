import numpy as np
import pytest

from kifmm3d import kernel, m2l_blas
from kifmm3d.expansion import INNER_SCALE, n_surface, surface
from kifmm3d.octree import (Domain, MortonKey, Octree, interaction_list,
                            transfer_vector)
from conftest import uniform_points


def test_transfer_offsets_table():
    offs = m2l_blas.transfer_offsets()
    assert offs.shape == (316, 3)
    cheb = np.abs(offs).max(axis=1)
    assert np.all((cheb >= 2) & (cheb <= 3))
    as_rows = [tuple(r) for r in offs]
    assert as_rows == sorted(as_rows)


def test_assemble_translation_is_kernel_matrix():
    off = (2, -1, 3)
    k = m2l_blas.assemble_translation(off, 3, 4)
    src = surface(3, np.asarray(off, dtype=np.float64), 1.0, INNER_SCALE)
    tgt = surface(4, np.zeros(3), 1.0, INNER_SCALE)
    assert np.array_equal(k, kernel.assemble_matrix(src, tgt))
    assert k.shape == (n_surface(4), n_surface(3))


def test_fat_thin_shapes_and_symmetry():
    fat, thin = m2l_blas.assemble_fat_thin(3, 3)
    ne = n_surface(3)
    assert fat.shape == (ne, 316 * ne)
    assert thin.shape == (316 * ne, ne)
    for i in (0, 57, 315):
        assert np.array_equal(thin[i * ne:(i + 1) * ne],
                              fat[:, i * ne:(i + 1) * ne].T)


def test_fat_thin_asymmetric_orders():
    fat, thin = m2l_blas.assemble_fat_thin(2, 3)
    assert fat.shape == (n_surface(3), 316 * n_surface(2))
    assert thin.shape == (316 * n_surface(3), n_surface(2))


def test_rsvd_recovers_exact_low_rank():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((60, 12)) @ rng.standard_normal((12, 200))
    u, s, v = m2l_blas.rsvd(a, rank=12, oversamples=5,
                            rng=np.random.default_rng(1))
    assert u.shape == (60, 12) and v.shape == (200, 12)
    resid = np.linalg.norm(a - (u * s) @ v.T) / np.linalg.norm(a)
    assert resid < 1e-12
    # Orthonormal factors.
    assert np.allclose(u.T @ u, np.eye(12), atol=1e-12)
    assert np.allclose(v.T @ v, np.eye(12), atol=1e-12)


def test_rsvd_argument_validation():
    a = np.ones((10, 10))
    with pytest.raises(ValueError):
        m2l_blas.rsvd(a, rank=0, oversamples=5, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        m2l_blas.rsvd(a, rank=8, oversamples=5, rng=np.random.default_rng(0))


def test_rsvd_seeded_reproducibility():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((40, 100))
    u1, s1, v1 = m2l_blas.rsvd(a, 10, 5, np.random.default_rng(7))
    u2, s2, v2 = m2l_blas.rsvd(a, 10, 5, np.random.default_rng(7))
    assert np.array_equal(u1, u2)
    assert np.array_equal(s1, s2)
    assert np.array_equal(v1, v2)


def test_compress_shapes_and_determinism():
    a = m2l_blas.compress(3, 3, sigma_min=1e-6, seed=0)
    b = m2l_blas.compress(3, 3, sigma_min=1e-6, seed=0)
    assert a.k > 0
    assert a.u.shape == (n_surface(3), a.k)
    assert a.s.shape == (n_surface(3), a.k)
    assert len(a.cores) == 316
    assert all(c.shape == (a.k, a.k) for c in a.cores)
    assert np.array_equal(a.u, b.u)
    assert all(np.array_equal(x, y) for x, y in zip(a.cores, b.cores))


def test_compress_rejects_total_truncation():
    with pytest.raises(m2l_blas.CompressionError):
        m2l_blas.compress(3, 3, sigma_min=1e6)


def test_sigma_min_zero_keeps_every_sketched_direction():
    ops = m2l_blas.compress(3, 3, sigma_min=0.0, oversamples=4)
    assert ops.k == min(n_surface(3), n_surface(3)) - 4


def test_level_scale_moves_the_cutoff():
    # A finer level magnifies the operator, so more directions survive an
    # absolute cutoff.
    coarse = m2l_blas.compress(3, 3, sigma_min=1e-6, level_scale=1.0)
    fine = m2l_blas.compress(3, 3, sigma_min=1e-6, level_scale=8.0)
    assert fine.k >= coarse.k


def test_recompress_factors_match_cores():
    ops = m2l_blas.precompute(3, 3, sigma_min=1e-9)
    assert len(ops.ubar) == 316 and len(ops.vbar) == 316
    for i in (0, 100, 315):
        kt = ops.ubar[i].shape[1]
        assert kt <= ops.k
        assert ops.vbar[i].shape == (ops.k, kt)
        rebuilt = ops.ubar[i] @ ops.vbar[i].T
        denom = np.linalg.norm(ops.cores[i])
        assert np.linalg.norm(rebuilt - ops.cores[i]) <= max(1e-9, 1e-8 * denom)


def test_compression_identity_small_order():
    # Reconstruction through the shared bases stays within the truncation
    # budget for each translation matrix.
    sigma_min = 1e-6
    ops = m2l_blas.precompute(4, 4, sigma_min=sigma_min)
    offs = m2l_blas.transfer_offsets()
    rng = np.random.default_rng(3)
    for i in rng.choice(316, size=6, replace=False):
        kt = m2l_blas.assemble_translation(offs[i], 4, 4)
        rebuilt = ops.u @ (ops.ubar[i] @ ops.vbar[i].T) @ ops.s.T
        rel = (np.linalg.norm(kt - rebuilt, 2) / np.linalg.norm(kt, 2))
        assert rel <= 100.0 * sigma_min


def _two_box_tree(offset, level=2, n_per_box=15, seed=4):
    """Source and target trees holding one populated far-field pair."""
    n = 1 << level
    dom = Domain(origin=(0.0, 0.0, 0.0), side=1.0)
    side = dom.box_side(level)
    rng = np.random.default_rng(seed)
    tgt_anchor = np.array([0, 0, 0])
    src_anchor = tgt_anchor + np.asarray(offset)
    assert np.all((src_anchor >= 0) & (src_anchor < n))
    tgt_pts = (tgt_anchor + rng.random((n_per_box, 3))) * side
    src_pts = (src_anchor + rng.random((n_per_box, 3))) * side
    return (Octree(src_pts, level, dom), Octree(tgt_pts, level, dom), dom)


def test_bucket_level_single_pair():
    src_tree, tgt_tree, _ = _two_box_tree((2, 0, 2))
    buckets = m2l_blas.bucket_level(src_tree, tgt_tree, 2)
    assert buckets.n_nonempty == 1
    idx = m2l_blas.transfer_vector_index()[(2, 0, 2)]
    rows_s, rows_t = buckets.pairs[idx]
    assert rows_s.tolist() == [0] and rows_t.tolist() == [0]


def test_bucket_level_matches_interaction_lists():
    pts = uniform_points(1200, seed=5)
    dom = Domain(origin=(0.0, 0.0, 0.0), side=1.0 + 1e-9)
    src_tree = Octree(pts, 3, dom)
    tgt_tree = Octree(uniform_points(900, seed=6), 3, dom)
    for level in (2, 3):
        buckets = m2l_blas.bucket_level(src_tree, tgt_tree, level)
        src_codes = src_tree.level_keys(level)
        tgt_codes = tgt_tree.level_keys(level)
        src_set = set(int(c) for c in src_codes)
        seen = set()
        offs = m2l_blas.transfer_offsets()
        for i, pair in enumerate(buckets.pairs):
            if pair is None:
                continue
            rows_s, rows_t = pair
            assert len(set(rows_t.tolist())) == len(rows_t)   # no collisions
            for rs, rt in zip(rows_s, rows_t):
                s = MortonKey.from_code(src_codes[rs])
                t = MortonKey.from_code(tgt_codes[rt])
                assert transfer_vector(s, t).offset == tuple(offs[i])
                seen.add((int(rs), int(rt)))
        # Completeness: every interaction-list member present in the source
        # tree appears exactly once.
        want = 0
        for code in tgt_codes:
            for member in interaction_list(MortonKey.from_code(code)):
                if member.code in src_set:
                    want += 1
        assert len(seen) == want


def _dense_level_reference(ops, buckets, multipoles, n_targets, level_scale):
    """Accumulate the compressed per-offset operators densely."""
    n_src, n_rhs, n_equiv = multipoles.shape
    out = np.zeros((n_targets, n_rhs, ops.u.shape[0]))
    offs = m2l_blas.transfer_offsets()
    for i, pair in enumerate(buckets.pairs):
        if pair is None:
            continue
        kt_small = ops.u @ (ops.ubar[i] @ ops.vbar[i].T) @ ops.s.T
        rows_s, rows_t = pair
        for rs, rt in zip(rows_s, rows_t):
            out[rt] += multipoles[rs] @ kt_small.T * level_scale
    return out


def test_apply_level_matches_dense_accumulation():
    src_tree, tgt_tree, dom = _two_box_tree((2, 0, 2), n_per_box=10)
    ops = m2l_blas.precompute(3, 3, sigma_min=1e-10)
    buckets = m2l_blas.bucket_level(src_tree, tgt_tree, 2)
    rng = np.random.default_rng(7)
    mult = rng.standard_normal((1, 2, n_surface(3)))
    got = m2l_blas.apply_level(ops, buckets, mult, 1, level_scale=4.0)
    want = _dense_level_reference(ops, buckets, mult, 1, 4.0)
    assert np.abs(got - want).max() < 1e-12 * np.abs(want).max()


def test_apply_level_full_level():
    # One populated level: exact against the compressed operators applied
    # densely (bucketing, scatter, scaling), and within the compression
    # budget against the true translation matrices.
    order = 5
    pts = uniform_points(1500, seed=8)
    dom = Domain(origin=(0.0, 0.0, 0.0), side=1.0 + 1e-9)
    tree = Octree(pts, 2, dom)
    assert tree.level_keys(2).shape[0] == 64  # sanity: fully populated
    level_side = dom.box_side(2)
    ops = m2l_blas.precompute(order, order, sigma_min=0.0,
                              level_scale=1.0 / level_side)
    buckets = m2l_blas.bucket_level(tree, tree, 2)
    rng = np.random.default_rng(9)
    n_boxes = tree.level_keys(2).shape[0]
    mult = rng.standard_normal((n_boxes, 1, n_surface(order)))
    got = m2l_blas.apply_level(ops, buckets, mult, n_boxes,
                               level_scale=1.0 / level_side)
    same = _dense_level_reference(ops, buckets, mult, n_boxes,
                                  1.0 / level_side)
    assert np.abs(got - same).max() < 1e-12 * np.abs(same).max()
    # Truth: dense K_t per pair, assembled at the true level geometry.
    codes = tree.level_keys(2)
    want = np.zeros_like(got)
    src_pos = {int(c): i for i, c in enumerate(codes)}
    for ti, code in enumerate(codes):
        t = MortonKey.from_code(code)
        for member in interaction_list(t):
            si = src_pos.get(member.code)
            if si is None:
                continue
            off = tuple(s - a for s, a in zip(member.anchor, t.anchor))
            kt = m2l_blas.assemble_translation(off, order, order) / level_side
            want[ti, 0] += kt @ mult[si, 0]
    rel = np.abs(got - want).max() / np.abs(want).max()
    assert rel < 1e-4


def test_apply_level_counts_calls():
    src_tree, tgt_tree, _ = _two_box_tree((0, 3, 0))
    ops = m2l_blas.precompute(3, 3, sigma_min=1e-6)
    buckets = m2l_blas.bucket_level(src_tree, tgt_tree, 2)
    calls = []
    mult = np.ones((1, 1, n_surface(3)))
    m2l_blas.apply_level(ops, buckets, mult, 1, counter=calls)
    assert calls == [buckets.n_nonempty + 2]
    assert calls[0] <= 318


def test_apply_level_multi_rhs_matches_single():
    pts = uniform_points(800, seed=10)
    dom = Domain(origin=(0.0, 0.0, 0.0), side=1.0 + 1e-9)
    tree = Octree(pts, 2, dom)
    ops = m2l_blas.precompute(3, 3, sigma_min=1e-8)
    buckets = m2l_blas.bucket_level(tree, tree, 2)
    n_boxes = tree.level_keys(2).shape[0]
    rng = np.random.default_rng(11)
    mult = rng.standard_normal((n_boxes, 3, n_surface(3)))
    batched = m2l_blas.apply_level(ops, buckets, mult, n_boxes)
    for r in range(3):
        single = m2l_blas.apply_level(ops, buckets, mult[:, r:r + 1], n_boxes)
        assert np.abs(batched[:, r:r + 1] - single).max() < 1e-13


def test_apply_level_threaded_strategy_agrees():
    pts = uniform_points(2000, seed=12)
    dom = Domain(origin=(0.0, 0.0, 0.0), side=1.0 + 1e-9)
    tree = Octree(pts, 3, dom)
    ops = m2l_blas.precompute(3, 3, sigma_min=1e-8)
    buckets = m2l_blas.bucket_level(tree, tree, 3)
    n_boxes = tree.level_keys(3).shape[0]
    rng = np.random.default_rng(13)
    mult = rng.standard_normal((n_boxes, 1, n_surface(3)))
    serial = m2l_blas.apply_level(ops, buckets, mult, n_boxes,
                                  strategy="serial")
    threaded = m2l_blas.apply_level(ops, buckets, mult, n_boxes,
                                    strategy="bucket-threads", threads=4)
    denom = np.abs(serial).max()
    assert np.abs(serial - threaded).max() <= 1e-10 * denom


def test_expand_rows_layout():
    rows = np.array([2, 5], dtype=np.int64)
    assert m2l_blas._expand_rows(rows, 1) is rows
    got = m2l_blas._expand_rows(rows, 3)
    assert got.tolist() == [6, 7, 8, 15, 16, 17]
