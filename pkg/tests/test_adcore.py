import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsmvs import adcore as ad
from cdsmvs.adcore import Param, Tensor


def brute_conv2d(x, k, stride=1, mode="reflect"):
    """Nested-loop cross-correlation with same padding."""
    c_in, h, w = x.shape
    c_out, _, ks, _ = k.shape
    p = ks // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)), mode="reflect" if mode == "reflect" else "constant")
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for y in range(ho):
            for x_ in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for i in range(ks):
                        for j in range(ks):
                            acc += k[o, c, i, j] * xp[c, y * stride + i, x_ * stride + j]
                out[o, y, x_] = acc
    return out


# ---------------------------------------------------------------- conv2d

def test_conv2d_ones_times_scalar_kernel():
    out = ad.conv2d(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv2d_impulse_response_is_flipped_kernel():
    rng = np.random.default_rng(1)
    k = rng.normal(size=(1, 1, 3, 3))
    img = np.zeros((1, 7, 7))
    img[0, 3, 3] = 1.0
    out = ad.conv2d(img, k, padding="zero").data[0]
    np.testing.assert_allclose(out[2:5, 2:5], k[0, 0, ::-1, ::-1], atol=1e-15)
    out[2:5, 2:5] = 0
    assert np.all(out == 0)


@pytest.mark.parametrize("mode", ["reflect", "zero"])
@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_nested_loops(mode, stride):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    got = ad.conv2d(x, k, stride=stride, padding=mode).data
    np.testing.assert_allclose(got, brute_conv2d(x, k, stride, mode), atol=1e-12)


def test_conv2d_random_single_channel_example():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 5, 5))
    k = rng.normal(size=(1, 1, 3, 3))
    np.testing.assert_allclose(ad.conv2d(x, k).data, brute_conv2d(x, k), atol=1e-12)


def test_conv2d_channel_mismatch_raises():
    with pytest.raises(ValueError):
        ad.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_conv2d_even_kernel_and_bad_padding_raise():
    with pytest.raises(ValueError):
        ad.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        ad.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), padding="wrap")


def test_conv2d_output_size_formula():
    out = ad.conv2d(np.ones((1, 9, 8)), np.ones((1, 1, 5, 5)), stride=2)
    assert out.shape == (1, (9 - 1) // 2 + 1, (8 - 1) // 2 + 1)


@settings(max_examples=25, deadline=None)
@given(c=st.floats(-5, 5), k=st.sampled_from([1, 3, 5]), seed=st.integers(0, 10_000))
def test_reflect_conv_preserves_constants(c, k, seed):
    rng = np.random.default_rng(seed)
    kern = rng.normal(size=(1, 2, k, k))
    out = ad.conv2d(np.full((2, 6, 7), c), kern).data
    np.testing.assert_allclose(out, kern.sum() * c, atol=1e-10)


def test_conv3d_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4, 4))
    k = rng.normal(size=(2, 2, 3, 3, 3))
    got = ad.conv3d(x, k).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    want = np.zeros((2, 3, 4, 4))
    for o in range(2):
        for d in range(3):
            for y in range(4):
                for x_ in range(4):
                    patch = xp[:, d:d + 3, y:y + 3, x_:x_ + 3]
                    want[o, d, y, x_] = np.sum(patch * k[o])
    np.testing.assert_allclose(got, want, atol=1e-12)


# ---------------------------------------------------------- grid sampling

def test_grid_sample_identity():
    rng = np.random.default_rng(5)
    img = rng.normal(size=(2, 4, 5))
    ys, xs = np.mgrid[0:4, 0:5].astype(float)
    out = ad.grid_sample_bilinear(img, np.stack([xs, ys]))
    np.testing.assert_allclose(out.data, img, atol=1e-15)


def test_grid_sample_cell_center_average():
    img = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    coords = np.full((2, 3, 3), 0.5)
    out = ad.grid_sample_bilinear(img, coords)
    np.testing.assert_allclose(out.data, 1.5)


def test_grid_sample_far_outside_is_zero():
    img = np.ones((1, 3, 3))
    out = ad.grid_sample_bilinear(img, np.full((2, 2, 2), -10.0))
    assert np.all(out.data == 0)
    assert not ad.sample_validity(np.full((2, 2, 2), -10.0), 3, 3).any()


def test_grid_sample_gradcheck_input_and_coords():
    rng = np.random.default_rng(6)
    img = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
    coords = Tensor(rng.uniform(-0.7, 4.7, size=(2, 3, 4)), requires_grad=True)
    w = rng.normal(size=(2, 3, 4))
    err = ad.gradcheck(lambda: ad.sum(ad.grid_sample_bilinear(img, coords) * w), [img, coords])
    assert err < 1e-6


# -------------------------------------------------------------- softmax

def test_softmax_temperature_examples():
    out = ad.softmax_temperature(np.array([1.0, 0.0]), 1.0).data
    np.testing.assert_allclose(out, [1 / (1 + np.exp(-1)), 1 / (1 + np.e)], rtol=1e-12)
    np.testing.assert_allclose(out, [0.7311, 0.2689], atol=1e-4)
    sharp = ad.softmax_temperature(np.array([1.0, 0.0]), 0.01).data
    assert sharp[0] >= 0.999
    assert sharp[1] < 1e-40
    np.testing.assert_allclose(ad.softmax_temperature(np.full((4, 2), 3.0), 0.3).data, 0.25)


def test_softmax_temperature_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        ad.softmax_temperature(np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        ad.softmax_temperature(np.zeros(3), -1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), tau=st.floats(1e-3, 10.0), k=st.integers(1, 5))
def test_softmax_sums_to_one(seed, tau, k):
    logits = np.random.default_rng(seed).normal(scale=5.0, size=(k, 3, 4))
    out = ad.softmax_temperature(logits, tau).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)


# ------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2, 4)), requires_grad=True)
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2, 4)))


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum(ad.square(x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_zeroing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum(ad.square(x))
    ad.backward(loss)
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(x * 2.0)


def test_shared_subexpression_visited_once():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    ad.backward(ad.sum(y + y))
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ------------------------------------------------------------------ sgd

def test_sgd_step_definition():
    p = Param([1.0])
    p.grad = np.array([2.0])
    ad.sgd_step([p], 0.1)
    np.testing.assert_allclose(p.data, [0.8])
    assert p.grad is None


def test_sgd_zero_lr_is_identity():
    p = Param([1.5, -2.0])
    p.grad = np.array([3.0, 4.0])
    ad.sgd_step([p], 0.0)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_sgd_descends_quadratic():
    p = Param([0.0])
    seen = [0.0]
    for _ in range(2):
        ad.backward(ad.sum(ad.square(p - 3.0)))
        ad.sgd_step([p], 0.25)
        seen.append(float(p.data[0]))
    # p_{n+1} = p_n - 0.25 * 2 (p_n - 3): 0 -> 1.5 -> 2.25
    np.testing.assert_allclose(seen, [0.0, 1.5, 2.25])


def test_lr_multiplier_scales_update():
    p = Param([1.0], lr_mult=0.5)
    p.grad = np.array([2.0])
    ad.sgd_step([p], 0.1)
    np.testing.assert_allclose(p.data, [0.9])


# ----------------------------------------------- finite-difference sweep

def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


UNARY = {
    "exp": (ad.exp, lambda r, s: r.normal(size=s)),
    "log": (ad.log, _pos),
    "sqrt": (ad.sqrt, _pos),
    "square": (ad.square, lambda r, s: r.normal(size=s)),
    "abs": (ad.abs, lambda r, s: r.normal(size=s)),
    "leaky_relu": (ad.leaky_relu, lambda r, s: r.normal(size=s)),
    "sigmoid": (ad.sigmoid, lambda r, s: r.normal(size=s)),
    "log_sigmoid": (ad.log_sigmoid, lambda r, s: r.normal(scale=3, size=s)),
    "neg": (ad.neg, lambda r, s: r.normal(size=s)),
    "upsample_bilinear": (ad.upsample_bilinear, lambda r, s: r.normal(size=s)),
    "softmax_tau": (lambda x: ad.softmax_temperature(x, 0.7), lambda r, s: r.normal(size=s)),
    "mean_axis": (lambda x: ad.mean(x, axis=1), lambda r, s: r.normal(size=s)),
    "sum_keep": (lambda x: ad.sum(x, axis=(0, 2), keepdims=True), lambda r, s: r.normal(size=s)),
    "getitem": (lambda x: x[1:, ::2], lambda r, s: r.normal(size=s)),
    "transpose": (lambda x: ad.transpose(x, (2, 0, 1)), lambda r, s: r.normal(size=s)),
}

BINARY = {
    "add": (ad.add, (3, 4, 5), (4, 1)),
    "sub": (ad.sub, (3, 4, 5), (3, 1, 5)),
    "mul": (ad.mul, (3, 4, 5), (3, 4, 5)),
    "div": (ad.div, (3, 4, 5), (1, 4, 5)),
    "inner_product_channels": (ad.inner_product_channels, (4, 3, 4, 5), (3, 4, 5)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(3))
def test_unary_gradcheck(name, seed):
    fn, gen = UNARY[name]
    rng = np.random.default_rng(seed)
    x = Tensor(gen(rng, (3, 4, 5)), requires_grad=True)
    w = rng.normal(size=fn(x.detach()).shape)
    assert ad.gradcheck(lambda: ad.sum(fn(x) * w), [x]) < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", range(3))
def test_binary_gradcheck(name, seed):
    fn, sa, sb = BINARY[name]
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=sa), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, size=sb), requires_grad=True)
    w = rng.normal(size=fn(a.detach(), b.detach()).shape)
    assert ad.gradcheck(lambda: ad.sum(fn(a, b) * w), [a, b]) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_concat_stack_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3, 3)), requires_grad=True)
    w = rng.normal(size=(3, 3, 3))
    w2 = rng.normal(size=(2, 2, 3, 3))
    assert ad.gradcheck(lambda: ad.sum(ad.concat([a, b]) * w), [a, b]) < 1e-4
    assert ad.gradcheck(lambda: ad.sum(ad.stack([a, a * 2.0]) * w2), [a]) < 1e-4


@pytest.mark.parametrize("mode", ["reflect", "zero"])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("seed", range(2))
def test_conv2d_gradcheck(mode, stride, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 6, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 5, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    w = rng.normal(size=ad.conv2d(x.detach(), k.detach(), stride=stride).shape)
    err = ad.gradcheck(lambda: ad.sum(ad.conv2d(x, k, b, stride=stride, padding=mode) * w), [x, k, b])
    assert err < 1e-4


def test_conv3d_gradcheck():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(2, 3, 4, 3)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    w = rng.normal(size=(2, 3, 4, 3))
    assert ad.gradcheck(lambda: ad.sum(ad.conv3d(x, k, b) * w), [x, k, b]) < 1e-4


def test_downsample_is_stride_two_conv():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 6, 6))
    k = rng.normal(size=(1, 1, 3, 3))
    np.testing.assert_allclose(ad.downsample(x, k).data, ad.conv2d(x, k).data[:, ::2, ::2], atol=1e-12)


def test_upsample_bilinear_grid_convention():
    x = np.arange(4.0).reshape(1, 2, 2)
    up = ad.upsample_bilinear(x).data[0]
    # even outputs reproduce inputs; odd ones are midpoints, last row/col clamps
    np.testing.assert_allclose(up[::2, ::2], x[0])
    np.testing.assert_allclose(up[0], [0.0, 0.5, 1.0, 1.0])


def test_determinism_bit_identical():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    a = ad.conv2d(x, k).data
    b = ad.conv2d(x, k).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------- checkpoint

class _Tiny(ad.Module):
    def __init__(self):
        self.w = Param(np.arange(6.0).reshape(2, 3))
        self.layers = [ad.Module(), ad.Module()]
        self.layers[0].k = Param(np.ones((1, 1, 3, 3)))
        self.b = Param(np.array([0.5]))


def test_param_names_unique_and_paths():
    names = [n for n, _ in _Tiny().named_params()]
    assert names == ["w", "layers.0.k", "b"]
    assert len(set(names)) == len(names)


def test_checkpoint_roundtrip(tmp_path):
    m = _Tiny()
    path = tmp_path / "m.cdsw"
    ad.save_checkpoint(path, m.state_dict())
    raw = path.read_bytes()
    assert raw[:4] == b"CDSW"
    state = ad.load_checkpoint(path)
    assert list(state) == sorted(state)
    for name, value in m.state_dict().items():
        assert state[name].tobytes() == value.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.cdsw"
    path.write_bytes(b"NOPE1234")
    with pytest.raises(ad.checkpoint.CheckpointError):
        ad.load_checkpoint(path)


def test_reflect_conv_gradcheck_kernel_wider_than_map():
    rng = np.random.default_rng(77)
    x = ad.Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
    k = ad.Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    w = rng.normal(size=(1, 2, 3))
    assert ad.gradcheck(lambda: ad.sum(ad.conv2d(x, k) * w), [x, k]) < 1e-6


def test_log_softmax_matches_log_of_softmax_and_gradchecks():
    rng = np.random.default_rng(78)
    x = ad.Tensor(rng.normal(size=(5, 3, 4)) * 3, requires_grad=True)
    np.testing.assert_allclose(ad.log_softmax(x, axis=0).data, np.log(ad.softmax(x, axis=0).data), atol=1e-12)
    w = rng.normal(size=(5, 3, 4))
    assert ad.gradcheck(lambda: ad.sum(ad.log_softmax(x, axis=0) * w), [x]) < 1e-6
    # saturated logits stay finite
    assert np.isfinite(ad.log_softmax(np.array([0.0, 2000.0])).data).all()


def test_clamp_min_value_and_gradient():
    x = ad.Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    y = ad.clamp_min(x, 0.25)
    np.testing.assert_array_equal(y.data, [0.25, 0.5, 2.0])
    ad.backward(ad.sum(y))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0])
