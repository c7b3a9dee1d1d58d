import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewcount.nn import Tensor, grad_check, kernels
from fewcount.nn import functional as F
from fewcount.nn.functional import ShapeError

from . import oracles


def rand(rng, *shape):
    return rng.normal(size=shape)


# --------------------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(3, 6, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(F.conv2d(x, w).data, x)


def test_conv_ones_kernel_on_one_hot():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    out = F.conv2d(x, np.ones((1, 1, 3, 3))).data[0]
    expected = oracles.conv2d_loops(x, np.ones((1, 1, 3, 3)), pad=(1, 1, 1, 1))[0]
    np.testing.assert_array_equal(out, expected)
    assert out[1:4, 1:4].sum() == 9 and out.sum() == 9


def test_conv_stride2_halves_680():
    x = np.zeros((1, 680, 680), dtype=np.float32)
    out = F.conv2d(x, np.zeros((1, 1, 7, 7), dtype=np.float32), stride=2, padding=3)
    assert out.shape == (1, 340, 340)


@pytest.mark.parametrize("stride,pad", [(1, "same"), (2, 3), (1, (0, 2, 1, 0)), (2, 0)])
def test_conv_matches_loops(stride, pad):
    rng = np.random.default_rng(1)
    x, w = rand(rng, 2, 7, 6), rand(rng, 3, 2, 3, 4)
    p = oracles.same_pad(3, 4) if pad == "same" else ((pad,) * 4 if isinstance(pad, int) else pad)
    np.testing.assert_allclose(
        F.conv2d(x, w, stride=stride, padding=pad).data, oracles.conv2d_loops(x, w, stride, p), atol=1e-12
    )


def test_conv_batched_equals_per_item():
    rng = np.random.default_rng(2)
    x, w, b = rand(rng, 3, 2, 5, 5), rand(rng, 4, 2, 3, 3), rand(rng, 4)
    batched = F.conv2d(x, w, b).data
    for n in range(3):
        np.testing.assert_allclose(batched[n], F.conv2d(x[n], w, b).data, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        F.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([1, 3, 5, 7]), st.integers(3, 9), st.integers(3, 9))
def test_same_padding_preserves_size(k, h, w):
    out = F.conv2d(np.ones((1, h, w)), np.ones((2, 1, k, k)))
    assert out.shape == (2, h, w)


# --------------------------------------------------------------------------- correlate


def test_correlate_peak_at_patch_centre():
    rng = np.random.default_rng(3)
    q = np.zeros((2, 9, 9))
    patch = rng.uniform(0.5, 1.0, size=(2, 3, 3))
    q[:, 4:7, 1:4] = patch
    out = F.correlate(q, patch).data[0]
    brute = oracles.correlate_dot(q, patch)
    np.testing.assert_allclose(out, brute, atol=1e-12)
    assert np.unravel_index(out.argmax(), out.shape) == (5, 2)


def test_correlate_zero_kernel_and_identity():
    q = np.random.default_rng(4).normal(size=(1, 4, 5))
    assert not F.correlate(q, np.zeros((1, 3, 3))).data.any()
    np.testing.assert_array_equal(F.correlate(q, np.ones((1, 1, 1))).data, q)


def test_correlate_equals_conv2d_with_reshaped_kernel():
    rng = np.random.default_rng(5)
    q, k = rand(rng, 3, 6, 6), rand(rng, 3, 3, 3)
    np.testing.assert_allclose(F.correlate(q, k).data, F.conv2d(q, k[None]).data, atol=1e-12)


def test_correlate_channel_mismatch():
    with pytest.raises(ShapeError):
        F.correlate(np.zeros((2, 4, 4)), np.zeros((3, 3, 3)))


# --------------------------------------------------------------------------- RoI ops


def test_roi_align_constant_map():
    feat = np.full((2, 8, 8), 5.0)
    for box in [(0.3, 1.2, 2.5, 3.1), (0, 0, 8, 8), (6.5, 6.5, 1.5, 1.5)]:
        np.testing.assert_allclose(F.roi_align(feat, box, 3, 3).data, 5.0)


def test_roi_align_row_major_oracle():
    feat = np.arange(16.0).reshape(1, 4, 4)
    out = F.roi_align(feat, (0.5, 0.5, 2, 2), 1, 1).data
    # samples at continuous (1.0, 1.0), (1.0, 2.0), (2.0, 1.0), (2.0, 2.0) -> index
    # coords 0.5 / 1.5; bilinear values 2.5, 3.5, 6.5, 7.5 (value = 4*row + col)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == pytest.approx((2.5 + 3.5 + 6.5 + 7.5) / 4)
    np.testing.assert_allclose(out, oracles.roi_align_points(feat, (0.5, 0.5, 2, 2), 1, 1))


def test_roi_align_output_shape():
    out = F.roi_align(np.zeros((7, 10, 10)), (1, 2, 4, 5), 3, 3)
    assert out.shape == (7, 3, 3)


def test_roi_align_rejects_degenerate_box():
    with pytest.raises(ValueError):
        F.roi_align(np.zeros((1, 4, 4)), (1, 1, 0, 2), 2, 2)
    with pytest.raises(ValueError):
        F.roi_align(np.zeros((1, 4, 4)), (5, 1, 1, 1), 2, 2)


def test_roi_align_backends_agree():
    rng = np.random.default_rng(6)
    feat = rand(rng, 3, 9, 11)
    for _ in range(20):
        box = (rng.uniform(-1, 9), rng.uniform(-1, 7), rng.uniform(0.5, 5), rng.uniform(0.5, 5))
        a = kernels.roi_align_forward_numpy(feat, box, 3, 2)
        b = kernels.roi_align_forward_numba(feat, box, 3, 2)
        np.testing.assert_allclose(a, b, atol=1e-12)
        g = rand(rng, 3, 3, 2)
        np.testing.assert_allclose(
            kernels.roi_align_backward_numpy(g, feat.shape, box),
            kernels.roi_align_backward_numba(g, feat.shape, box),
            atol=1e-12,
        )


def test_roi_pool_constant_and_aligned_max():
    np.testing.assert_array_equal(F.roi_pool(np.full((1, 6, 6), 2.0), (1.2, 0.7, 3, 2), 2, 2).data, 2.0)
    feat = np.random.default_rng(7).normal(size=(2, 6, 6))
    out = F.roi_pool(feat, (2, 3, 2, 2), 1, 1).data
    np.testing.assert_array_equal(out[:, 0, 0], feat[:, 3:5, 2:4].reshape(2, -1).max(axis=1))


def test_roi_pool_quantisation_insensitive():
    feat = np.random.default_rng(8).normal(size=(2, 8, 8))
    a = F.roi_pool(feat, (2.0, 1.0, 3.0, 4.0), 2, 2).data
    b = F.roi_pool(feat, (2.3, 1.4, 3.0, 4.0), 2, 2).data
    np.testing.assert_array_equal(a, b)


def test_roi_pool_backends_agree_with_oracle():
    rng = np.random.default_rng(9)
    feat = rand(rng, 2, 7, 9)
    for _ in range(30):
        box = (rng.uniform(0, 8), rng.uniform(0, 6), rng.uniform(0.3, 6), rng.uniform(0.3, 6))
        ref = oracles.roi_pool_max(feat, box, 3, 3)
        np.testing.assert_array_equal(kernels.roi_pool_forward_numpy(feat, box, 3, 3)[0], ref)
        np.testing.assert_array_equal(kernels.roi_pool_forward_numba(feat, box, 3, 3)[0], ref)


def test_roi_pool_gradient_routes_to_argmax():
    feat = np.zeros((1, 4, 4))
    feat[0, 1, 2] = 3.0
    t = Tensor(feat, requires_grad=True)
    F.sum(F.roi_pool(t, (0, 0, 4, 4), 1, 1)).backward()
    expected = np.zeros_like(feat)
    expected[0, 1, 2] = 1.0
    np.testing.assert_array_equal(t.grad, expected)


# --------------------------------------------------------------------------- resize


def test_resize_identity_and_constant():
    x = np.random.default_rng(10).normal(size=(2, 5, 4))
    np.testing.assert_allclose(F.bilinear_resize(x, 1.0).data, x, atol=1e-15)
    c = F.bilinear_resize(np.full((1, 3, 4), 7.0), 2.0).data
    assert c.shape == (1, 6, 8)
    np.testing.assert_allclose(c, 7.0)


def test_resize_two_pixel_row():
    x = np.array([[[0.0, 1.0]]])
    out = F.bilinear_resize(x, 2.0).data
    # half-pixel sampling: source x = (j + 0.5)/2 - 0.5 -> 0 (clamped), 0.25, 0.75, 1.25 (hi clamped)
    np.testing.assert_allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(out, oracles.resize_pointwise(x[:, :, :], 2, 4))


@pytest.mark.parametrize("shape,scale", [((2, 5, 7), 2.0), ((1, 6, 6), 0.5), ((3, 4, 9), 1.5)])
def test_resize_matches_pointwise(shape, scale):
    x = np.random.default_rng(11).normal(size=shape)
    out = F.bilinear_resize(x, scale).data
    np.testing.assert_allclose(out, oracles.resize_pointwise(x, *out.shape[1:]), atol=1e-12)


def test_resize_errors():
    with pytest.raises(ValueError):
        F.bilinear_resize(np.ones((1, 2, 2)), 0.0)
    with pytest.raises(ShapeError):
        F.bilinear_resize(np.ones((1, 2, 2)), 0.1)


# --------------------------------------------------------------------------- normalisation / activations


def test_layer_norm_fixed_point():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(4, 6, 6))
    x = (x - x.mean()) / x.std()
    out = F.layer_norm(x, np.ones(4), np.zeros(4)).data
    np.testing.assert_allclose(out, x, rtol=1e-4, atol=1e-5)


def test_layer_norm_moments():
    x = np.random.default_rng(13).normal(3.0, 5.0, size=(3, 4, 5, 6))
    out = F.layer_norm(x, np.ones(4), np.zeros(4), eps=0.0).data
    for inst in out:
        assert inst.mean() == pytest.approx(0.0, abs=1e-12)
        assert inst.var() == pytest.approx(1.0, abs=1e-12)


def test_batch_norm_eval_centres_on_running_mean():
    m = np.array([1.5, -2.0])
    x = np.broadcast_to(m[:, None, None], (2, 4, 4)).copy()
    out = F.batch_norm(x, np.ones(2), np.zeros(2), m.copy(), np.array([4.0, 9.0]), training=False).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_batch_norm_train_updates_running_stats():
    x = np.random.default_rng(14).normal(2.0, 3.0, size=(2, 8, 8))
    rm, rv = np.zeros(2), np.ones(2)
    F.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=True, momentum=0.1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(1, 2)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(1, 2), ddof=1))


def test_norm_shape_mismatch():
    with pytest.raises(ShapeError):
        F.layer_norm(np.zeros((3, 2, 2)), np.ones(2), np.zeros(2))
    with pytest.raises(ShapeError):
        F.batch_norm(np.zeros((3, 2, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), False)


def test_activations():
    np.testing.assert_array_equal(F.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
    assert F.leaky_relu(Tensor(np.array([-10.0])), 0.01).data[0] == pytest.approx(-0.1)
    x = Tensor(np.arange(5.0))
    assert F.dropout(x, 0.5, training=False) is x


def test_dropout_train_scaling():
    x = Tensor(np.ones(200_000))
    out = F.dropout(x, 0.25, training=True, rng=np.random.default_rng(0)).data
    kept = out != 0
    np.testing.assert_allclose(out[kept], 1 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.01
    with pytest.raises(ValueError):
        F.dropout(x, 1.0, training=True)


def test_flip_hw():
    k = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(F.flip_hw(k).data, [[[4.0, 3.0], [2.0, 1.0]]])
    x = np.random.default_rng(15).normal(size=(3, 4, 5))
    np.testing.assert_array_equal(F.flip_hw(F.flip_hw(x)).data, x)
    sym = np.array([[[1.0, 2.0, 1.0], [3.0, 5.0, 3.0], [1.0, 2.0, 1.0]]])
    np.testing.assert_array_equal(F.flip_hw(sym).data, sym)


# --------------------------------------------------------------------------- gradients


def test_grad_check_linear_is_exact():
    w = np.random.default_rng(16).normal(size=(3, 4))
    assert grad_check(lambda x: F.sum(F.mul(x, w)), [np.ones((3, 4))]) < 1e-8


def test_grad_check_conv_relu_composite():
    rng = np.random.default_rng(17)
    x, w = rng.normal(size=(1, 4, 4)), rng.normal(size=(2, 1, 3, 3))
    proj = rng.normal(size=(2, 4, 4))
    err = grad_check(lambda a, b: F.sum(F.mul(F.relu(F.conv2d(a, b)), proj)), [x, w], eps=1e-5)
    assert err < 1e-3


def test_grad_check_roi_align():
    rng = np.random.default_rng(18)
    proj = rng.normal(size=(2, 3, 3))
    err = grad_check(lambda f: F.sum(F.mul(F.roi_align(f, (0.7, 1.3, 3.1, 4.2), 3, 3), proj)), [rng.normal(size=(2, 6, 7))])
    assert err < 1e-3


def test_grad_check_rejects_non_finite():
    with pytest.raises(ValueError):
        grad_check(lambda x: F.sum(x), [np.array([np.nan])])


def test_backward_accumulates_shared_use():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    F.sum(F.add(F.mul(x, x), x)).backward()
    np.testing.assert_array_equal(x.grad, [5.0, 7.0])
