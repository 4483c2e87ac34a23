import itertools

import numpy as np
import pytest

from treereg.autodiff import Tensor, ops, profile
from treereg.autodiff.gradcheck import check
from treereg.bh_tree import EMPTY, build_tree, child_labels
from treereg.cloud_io import PointCloud
from treereg.config import RunConfig
from treereg.diagnostics import TINY_CONFIG
from treereg.encoder import (
    CENTER_TAP,
    N_TAPS,
    EncoderError,
    TreeView,
    child_max_pool,
    conv_window,
    density_features,
    encode,
    encode_branch,
    init_encoder_params,
    tree_conv,
)

TINY = RunConfig(**TINY_CONFIG).validate()


def tiny_params(seed=0):
    return {k: Tensor(v) for k, v in init_encoder_params(TINY.encoder(), np.random.default_rng(seed)).items()}


def full_grid(depth):
    side = 1 << depth
    g = (np.arange(side) + 0.5) / side * 2 - 1
    return np.array(list(itertools.product(g, g, g)))


def test_isolated_node_identity_filter():
    tree = build_tree(PointCloud([[0.3, 0.3, 0.3]]), 2)
    w = np.zeros((N_TAPS * 2, 2))
    w[CENTER_TAP * 2 : CENTER_TAP * 2 + 2] = np.eye(2)
    out = tree_conv(conv_window(tree, 2), np.array([[1.5, -2.0]]), w)
    np.testing.assert_array_equal(out.data, [[1.5, -2.0]])


def test_full_grid_counts_taps():
    tree = build_tree(PointCloud(full_grid(2)), 2)
    out = tree_conv(conv_window(tree, 2), np.ones((64, 1)), np.ones((27, 1))).data[:, 0]
    grid = tree[2].grid
    interior = np.all((grid >= 1) & (grid <= 2), axis=1)
    np.testing.assert_array_equal(out[interior], 27)
    np.testing.assert_array_equal(out[np.all(grid == 0, axis=1)], 8)


def test_tree_conv_brute_force(rng):
    tree = build_tree(PointCloud(rng.uniform(-1, 1, (200, 3))), 3)
    lv = tree[3]
    feats = rng.normal(size=(len(lv), 2))
    w = rng.normal(size=(27 * 2, 3))
    got = tree_conv(conv_window(tree, 3), feats, w).data
    where = {tuple(g): i for i, g in enumerate(lv.grid)}
    for i, g in enumerate(lv.grid):
        rows = []
        for dz, dy, dx in itertools.product((-1, 0, 1), repeat=3):
            j = where.get((g[0] + dx, g[1] + dy, g[2] + dz))
            rows.append(feats[j] if j is not None else np.zeros(2))
        np.testing.assert_allclose(got[i], np.concatenate(rows) @ w, atol=1e-12)


def test_tree_conv_shape_errors():
    tree = build_tree(PointCloud([[0.0, 0.0, 0.0]]), 1)
    with pytest.raises(EncoderError):
        tree_conv(conv_window(tree, 1), np.ones((2, 1)), np.ones((27, 1)))
    with pytest.raises(EncoderError):
        tree_conv(conv_window(tree, 1), np.ones((1, 2)), np.ones((27, 1)))


def test_child_pool_examples():
    tree = build_tree(PointCloud([[0.3, 0.3, 0.3]]), 1)
    groups = tree.children(0)
    np.testing.assert_array_equal(child_max_pool(groups, np.array([[2.0, 0.5]])).data, [[2.0, 0.5]])
    np.testing.assert_array_equal(child_max_pool(groups, np.array([[-1.0]])).data, [[0.0]])


def test_child_pool_brute_force(rng):
    tree = build_tree(PointCloud(rng.uniform(-1, 1, (300, 3))), 3)
    feats = rng.normal(size=(len(tree[3]), 4))
    got = child_max_pool(tree.children(2), feats).data
    for i, lab in enumerate(tree[2].labels):
        rows = [np.zeros(4)] * 8
        for k, c in enumerate(child_labels(lab)):
            j = tree.index_of_label(3, c)
            if j >= 0:
                rows[k] = feats[j]
        np.testing.assert_array_equal(got[i], np.max(rows, axis=0))


def _view(cloud, depth=4):
    return TreeView.from_tree(build_tree(cloud, depth), TINY.depths_used)


def test_encode_shape_and_zero_rows(rng):
    pts = rng.uniform(-1, 1, (300, 3)) * [1.0, 1.0, 0.2]
    view = _view(PointCloud(pts))
    fm = encode(view, tiny_params(), TINY.encoder())
    assert fm.features.shape == (64, TINY.output_cols)
    assert not view.mask.all()
    np.testing.assert_array_equal(fm.features.data[~view.mask], 0)
    assert abs(fm.mass.sum() - 1) < 1e-12


def test_default_output_shape(rng):
    cfg = RunConfig().validate()
    params = {k: Tensor(v) for k, v in init_encoder_params(cfg.encoder(), rng).items()}
    view = TreeView.from_tree(build_tree(PointCloud(rng.uniform(-1, 1, (500, 3))), 6), cfg.depths_used)
    assert encode(view, params, cfg.encoder()).features.shape == (64, 512)


def test_branch_zero_rows_every_stage(rng):
    view = _view(PointCloud(rng.uniform(-1, 0, (100, 3))))
    for b in ("position", "density"):
        out = encode_branch(view, b, tiny_params(), TINY.encoder()).data
        np.testing.assert_array_equal(out[~view.mask], 0)


def test_permutation_bit_identical(rng):
    pts = rng.uniform(-1, 1, (500, 3))
    p = tiny_params()
    a = encode(_view(PointCloud(pts)), p, TINY.encoder()).features.data
    b = encode(_view(PointCloud(pts[rng.permutation(500)])), p, TINY.encoder()).features.data
    assert a.tobytes() == b.tobytes()


def test_density_scale_invariance(rng):
    view = _view(PointCloud(rng.uniform(-1, 1, (400, 3))))
    p = tiny_params()
    a = encode_branch(view, "density", p, TINY.encoder()).data
    tree = build_tree(PointCloud(rng.uniform(-1, 1, (10, 3))), 4)
    raw = tree[4].raw_inv_density
    np.testing.assert_allclose(density_features(2 * raw), density_features(raw), rtol=1e-15)
    view.density = density_features(3.0 * view.density[:, 0])
    np.testing.assert_allclose(encode_branch(view, "density", p, TINY.encoder()).data, a, rtol=1e-12, atol=1e-14)


def test_fusion_identity(rng):
    view = _view(PointCloud(rng.uniform(-1, 1, (300, 3))))
    p = tiny_params()
    pos = encode_branch(view, "position", p, TINY.encoder())
    expect = ops.mask_rows(ops.linear(pos, p["encoder.fc.weight"], p["encoder.fc.bias"]), view.mask).data
    np.testing.assert_allclose(encode(view, p, TINY.encoder(), density_ones=True).features.data, expect)


def test_locality_before_pooling(rng):
    pts = rng.uniform(-1, 1, (400, 3))
    tree = build_tree(PointCloud(pts), 4)
    moved = pts.copy()
    i = 0
    lv = tree[4]
    cell = np.floor((pts[i] + 1) * 8).astype(int)
    # nudge one point inside its own depth-4 cell
    lo = cell / 8 - 1
    moved[i] = np.clip(pts[i] + 0.001, lo + 1e-9, lo + 1 / 8 - 1e-9)
    tree2 = build_tree(PointCloud(moved), 4)
    w = rng.normal(size=(27 * 3, 2))
    a = tree_conv(conv_window(tree, 4), lv.com, w).data
    b = tree_conv(conv_window(tree2, 4), tree2[4].com, w).data
    changed = np.flatnonzero(np.any(a != b, axis=1))
    own = np.flatnonzero(np.all(lv.grid == cell, axis=1))[0]
    nbrs = set(tree.neighbors(4)[own][tree.neighbors(4)[own] != EMPTY]) | {own}
    assert set(changed) <= nbrs and own in changed


def test_encode_gradcheck(rng):
    with profile("float64"):
        view = _view(PointCloud(rng.uniform(-1, 1, (120, 3))))
        p = tiny_params()
        w = rng.normal(size=(64, TINY.output_cols))
        names = ["encoder.position.unit4.conv", "encoder.density.unit3.gamma", "encoder.position.lift.weight", "encoder.fc.weight"]
        fn = lambda: ops.sum(ops.mul(encode(view, p, TINY.encoder()).features, w))
        assert check(fn, [p[n] for n in names]) <= 1e-4


def test_view_requires_depth():
    with pytest.raises(EncoderError):
        TreeView.from_tree(build_tree(PointCloud([[0.0, 0.0, 0.0]]), 3), [4, 3])
