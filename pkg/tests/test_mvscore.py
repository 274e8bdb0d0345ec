import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsmvs import adcore as ad
from cdsmvs import mvscore as mv
from cdsmvs.geometry import DepthHypotheses


# ------------------------------------------------------------ costs

def test_cost_self_similarity_of_ones():
    f = np.ones((4, 3, 5))
    v = mv.two_view_cost(f, np.broadcast_to(f, (6, 4, 3, 5)))
    np.testing.assert_array_equal(v.data, 1.0)


def test_cost_of_orthogonal_features_is_zero():
    a = np.zeros((2, 3, 3))
    b = np.zeros((1, 2, 3, 3))
    a[0] = 1
    b[0, 1] = 1
    assert np.all(mv.two_view_cost(a, b).data == 0)


def test_cost_matches_loop_oracle():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(5, 3, 4))
    w = rng.normal(size=(4, 5, 3, 4))
    got = mv.two_view_cost(f, w).data
    want = np.zeros((4, 3, 4))
    for d in range(4):
        for y in range(3):
            for x in range(4):
                want[d, y, x] = sum(f[c, y, x] * w[d, c, y, x] for c in range(5)) / 5
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_cost_shape_mismatch():
    with pytest.raises(ValueError):
        mv.two_view_cost(np.zeros((4, 3, 3)), np.zeros((2, 5, 3, 3)))


def test_entropy_examples():
    v = np.zeros((48, 2, 2))
    np.testing.assert_allclose(mv.cost_entropy(v).data, np.log(48), atol=1e-12)
    assert abs(np.log(48) - 3.8712) < 1e-4
    peaked = np.zeros((48, 2, 2))
    peaked[7] = 40.0
    assert mv.cost_entropy(peaked).data.max() < 1e-6
    two = np.zeros((2, 1, 1))
    two[0] = 1.0  # softmax -> [0.731, 0.269]
    p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    h = mv.cost_entropy(two).data[0, 0]
    assert abs(h - -(p * np.log(p)).sum()) < 1e-14
    assert abs(h - 0.58220) < 1e-5


def test_entropy_gradcheck():
    rng = np.random.default_rng(1)
    v = ad.Tensor(rng.normal(size=(6, 3, 3)), requires_grad=True)
    w = rng.normal(size=(3, 3))
    assert ad.gradcheck(lambda: ad.sum(mv.cost_entropy(v) * w), [v]) < 1e-6


# ------------------------------------------------------------ visibility

def test_visibility_zero_init_is_half():
    vis = mv.VisNet(np.random.default_rng(0))
    rng = np.random.default_rng(1)
    w = mv.visibility_weight(rng.normal(size=(6, 6)), rng.normal(size=(6, 6)), vis)
    np.testing.assert_array_equal(w.data, 0.5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.floats(0.1, 30))
def test_visibility_open_interval(seed, scale):
    rng = np.random.default_rng(seed)
    vis = mv.VisNet(rng)
    vis.c2.w.data = rng.normal(size=vis.c2.w.shape) * 0.5
    w = vis(rng.normal(size=(5, 5)) * scale, rng.normal(size=(5, 5))).data
    assert np.all(w > 0) and np.all(w < 1)


def test_visibility_without_curvature_ignores_nc():
    rng = np.random.default_rng(2)
    vis = mv.VisNet(rng, use_curvature=False)
    vis.c2.w.data = rng.normal(size=vis.c2.w.shape)
    ent = rng.normal(size=(5, 5))
    a = vis(rng.normal(size=(5, 5)), ent).data
    b = vis(rng.normal(size=(5, 5)), ent).data
    assert np.array_equal(a, b)


# ------------------------------------------------------------ aggregation

def test_aggregate_equal_weights_is_mean():
    rng = np.random.default_rng(3)
    vols = [rng.normal(size=(4, 3, 3)) for _ in range(3)]
    w = [np.full((3, 3), 0.3)] * 3
    np.testing.assert_allclose(mv.aggregate_costs(vols, w).data, np.mean(vols, axis=0), atol=1e-14)


def test_aggregate_selection_limit():
    rng = np.random.default_rng(4)
    vols = [rng.normal(size=(4, 3, 3)) for _ in range(3)]
    eps = 1e-6
    w = [np.full((3, 3), 1 - eps), np.full((3, 3), eps), np.full((3, 3), eps)]
    assert np.abs(mv.aggregate_costs(vols, w).data - vols[0]).max() < 10 * eps * np.abs(vols).max()


def test_aggregate_matches_loop_and_is_scale_invariant():
    rng = np.random.default_rng(5)
    vols = [rng.normal(size=(3, 2, 2)) for _ in range(3)]
    ws = [rng.uniform(0.05, 1, size=(2, 2)) for _ in range(3)]
    got = mv.aggregate_costs(vols, ws).data
    for d in range(3):
        for y in range(2):
            for x in range(2):
                num = sum(ws[i][y, x] * vols[i][d, y, x] for i in range(3))
                den = sum(ws[i][y, x] for i in range(3))
                assert abs(got[d, y, x] - num / den) < 1e-14
    scaled = mv.aggregate_costs(vols, [7.5 * w for w in ws]).data
    np.testing.assert_allclose(scaled, got, atol=1e-9)


def test_aggregate_errors():
    with pytest.raises(ValueError):
        mv.aggregate_costs([], [])


def test_aggregate_floor_keeps_finite():
    v = mv.aggregate_costs([np.ones((2, 2, 2))], [np.zeros((2, 2))]).data
    assert np.all(v == 0)


# --------------------------------------------------------- regularizer

def test_zero_regularizer_is_softmax():
    reg = mv.CostRegularizer(np.random.default_rng(0))
    v = np.random.default_rng(1).normal(size=(6, 4, 4))
    np.testing.assert_allclose(mv.regularize(v, reg).data, ad.softmax(v).data, atol=1e-15)


def test_regularizer_output_normalised_and_peaked():
    rng = np.random.default_rng(2)
    reg = mv.CostRegularizer(rng)
    reg.c3.w.data = rng.normal(size=reg.c3.w.shape) * 0.05
    v = rng.normal(size=(8, 5, 5)) * 0.1
    v[3] += 20
    p = mv.regularize(v, reg).data
    assert np.abs(p.sum(axis=0) - 1).max() < 1e-9 and p.min() >= 0
    assert np.all(p.argmax(axis=0) == 3)


# ------------------------------------------------------------ regression

def test_regress_examples():
    vals = np.broadcast_to(np.linspace(1, 8, 8)[:, None, None], (8, 2, 2))
    hyps = DepthHypotheses(vals.copy(), 0)
    onehot = np.zeros((8, 2, 2))
    onehot[3] = 1
    np.testing.assert_array_equal(mv.regress_depth(onehot, hyps).data, 4.0)
    two = DepthHypotheses(np.stack([np.full((1, 1), 2.0), np.full((1, 1), 4.0)]), 0)
    assert mv.regress_depth(np.full((2, 1, 1), 0.5), two).data[0, 0] == 3.0


def test_regress_matches_dot_and_stays_in_range():
    rng = np.random.default_rng(6)
    p = ad.softmax(rng.normal(size=(8, 3, 3)) * 3).data
    vals = np.sort(rng.uniform(1, 5, size=(8, 3, 3)), axis=0)
    d = mv.regress_depth(p, vals).data
    for y in range(3):
        for x in range(3):
            assert abs(d[y, x] - np.dot(p[:, y, x], vals[:, y, x])) < 1e-14
    assert np.all(d >= vals.min(axis=0) - 1e-12) and np.all(d <= vals.max(axis=0) + 1e-12)


def test_confidence_examples():
    onehot = np.zeros((8, 2, 2))
    onehot[0] = 1
    np.testing.assert_allclose(mv.confidence(onehot), 1.0)
    np.testing.assert_allclose(mv.confidence(np.full((8, 2, 2), 1 / 8)), 0.5)
    np.testing.assert_allclose(mv.confidence(np.full((48, 1, 1), 1 / 48)), 4 / 48)
    assert abs(4 / 48 - 0.0833) < 1e-4


def test_confidence_window_around_argmax():
    p = np.zeros((10, 1, 1))
    p[[4, 5, 6, 7, 8], 0, 0] = [0.1, 0.5, 0.2, 0.1, 0.1]
    # argmax 5 -> slices 4..7
    assert abs(mv.confidence(p)[0, 0] - 0.9) < 1e-15
    end = np.zeros((10, 1, 1))
    end[9] = 0.7
    end[6] = 0.3
    assert abs(mv.confidence(end)[0, 0] - 1.0) < 1e-15


# ------------------------------------------------------------ refinement

def test_refine_zero_init_is_identity():
    rng = np.random.default_rng(7)
    net = mv.RefineNet(rng)
    d = rng.uniform(2, 6, size=(8, 8))
    out = mv.refine_depth(d, rng.uniform(size=(3, 8, 8)), net, 2.0, 6.0)
    np.testing.assert_array_equal(out.data, d)


def test_refine_residual_bound():
    rng = np.random.default_rng(8)
    net = mv.RefineNet(rng)
    net.c3.w.data = rng.normal(size=net.c3.w.shape) * 0.1
    d = rng.uniform(2, 6, size=(8, 8))
    img = rng.uniform(size=(3, 8, 8))
    out = mv.refine_depth(d, img, net, 2.0, 6.0).data
    norm = (d - 2.0) / 4.0
    h = ad.leaky_relu(net.c2(ad.leaky_relu(net.c1(np.concatenate([norm[None], img])))))
    raw = net.c3(h).data[0]
    assert np.abs(out - d).max() <= 4.0 * np.abs(raw).max() + 1e-12


# ------------------------------------------------------------ cascade

def plane_views(seed=0, n_views=3, res=(128, 128)):
    from cdsmvs.synthdata import SceneSpec, generate_scene

    s = generate_scene(SceneSpec(layout="plane", texture="perlin", texture_freq=1.0, rig="linear",
                                 n_views=n_views, baseline=1.0, distance=4.0, depth_range=(1.7, 6.4),
                                 resolution=res, seed=seed))
    return [mv.View(v.image, v.cam, i) for i, v in enumerate(s.views)]


def test_identity_feature_plane_sweep_hits_gt_plane():
    views = plane_views()
    out = mv.cascade_forward(views[0], views[1:], mv.MvsNet(), feature_fn=mv.identity_features)
    st0 = out.stages[0]
    gt = np.abs(st0.hyps.values - 4.0).argmin(axis=0)
    assert np.all(gt == 23)  # 1.7 + 23 * 0.1
    inner = np.all([v[23] for v in st0.valid], axis=0)
    inner[[0, -1], :] = inner[:, [0, -1]] = False
    assert inner.sum() > 100
    assert np.mean(st0.prob.data.argmax(axis=0)[inner] == 23) >= 0.95


def test_cascade_shapes_and_single_source():
    views = plane_views(res=(32, 32))
    out = mv.cascade_forward(views[0], views[1:2], mv.MvsNet(), feature_fn=mv.identity_features)
    assert [d.shape for d in out.depths] == [(4, 4), (8, 8), (16, 16), (32, 32)]
    assert [s.prob.shape[0] for s in out.stages] == [48, 32, 8]
    assert all(np.isfinite(d.data).all() for d in out.depths)
    fc = mv.fused_confidence(out)
    assert fc.shape == (32, 32) and fc.min() >= 0 and fc.max() <= 1


def test_cascade_needs_sources():
    views = plane_views(res=(32, 32))
    with pytest.raises(ValueError):
        mv.cascade_forward(views[0], [], mv.MvsNet(), feature_fn=mv.identity_features)


def test_feature_cache_is_per_pair():
    views = plane_views(res=(32, 32))
    cache = mv.FeatureCache(mv.identity_features)
    mv.cascade_forward(views[0], views[1:], mv.MvsNet(), cache=cache)
    # the reference is extracted once per source because its epipole differs
    assert cache.misses == 4
    mv.cascade_forward(views[0], views[1:], mv.MvsNet(), cache=cache)
    assert cache.misses == 4


def test_cascade_runs_with_learned_features_and_backprops():
    from cdsmvs.cdsfnet import CdsfNetConfig

    views = plane_views(res=(32, 32))
    net = mv.MvsNet(mv.MvsConfig(features=CdsfNetConfig(seed=1)))
    out = mv.cascade_forward(views[0], views[1:], net, tau=0.5)
    loss = ad.sum(ad.square(out.depth_refined - 4.0))
    ad.backward(loss)
    assert np.abs(net.feat.e1.kxx[0].grad).sum() > 0
    assert np.abs(net.reg[2].c3.w.grad).sum() > 0
    # earlier stages only feed later ones through detached hypotheses
    assert net.reg[0].c3.w.grad is None
