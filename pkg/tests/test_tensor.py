import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import bilinear_ref, conv_ref, maxpool_ref, numeric_grad, rel_error
from progretinex.tensor import (
    ConvParams,
    NumericError,
    OptimizerState,
    ShapeError,
    bilinear_resize,
    concat_channels,
    lr_schedule,
    maxpool_backward,
    maxpool_forward,
    msra_init,
    pointwise_conv_backward,
    pointwise_conv_forward,
    pool_output_size,
    pool_windows,
    relu_backward,
    relu_forward,
    sgd_step,
)

GRAD_CASES = 20


def _conv(rng, c_in, c_out):
    return ConvParams(rng.standard_normal((c_out, c_in)), rng.standard_normal(c_out))


# -- pointwise convolution ---------------------------------------------------


def test_conv_identity_weights():
    x = np.random.default_rng(0).random((2, 3, 4, 5)).astype(np.float32)
    out = pointwise_conv_forward(x, ConvParams(np.eye(3), np.zeros(3)))
    np.testing.assert_array_equal(out, x)


def test_conv_mean_of_channels():
    x = np.array([0.3, 0.6, 0.9], dtype=np.float32).reshape(1, 3, 1, 1)
    out = pointwise_conv_forward(x, ConvParams(np.full((1, 3), 1 / 3), np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == pytest.approx(0.6, abs=1e-6)


def test_conv_matches_per_pixel_loop(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    p = _conv(rng, 3, 5)
    ref = conv_ref(x, p.matrix.astype(np.float64), p.bias.astype(np.float64))
    np.testing.assert_allclose(pointwise_conv_forward(x, p), ref, atol=1e-6)


def test_conv_channel_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 3, 3\).*\(4, 3, 1, 1\)"):
        pointwise_conv_forward(np.zeros((1, 2, 3, 3)), ConvParams(np.zeros((4, 3)), np.zeros(4)))


def test_conv_backward_zero_grad(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    gi, gw, gb = pointwise_conv_backward(x, _conv(rng, 3, 2), np.zeros((2, 2, 4, 4)))
    assert not gi.any() and not gw.any() and not gb.any()


def test_conv_backward_scalar_case():
    x = np.full((1, 1, 1, 1), 0.75)
    _, gw, gb = pointwise_conv_backward(x, ConvParams(np.ones((1, 1)), np.zeros(1)), np.full((1, 1, 1, 1), -2.0))
    assert gw.ravel()[0] == pytest.approx(-1.5)
    assert gb[0] == pytest.approx(-2.0)


@pytest.mark.parametrize("seed", range(GRAD_CASES))
def test_conv_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, c_in, c_out, h, w = (int(v) for v in rng.integers(1, 5, size=5))
    x = rng.standard_normal((n, c_in, h, w)).astype(np.float32)
    p = _conv(rng, c_in, c_out)
    g = rng.standard_normal((n, c_out, h, w)).astype(np.float32)
    W, b = p.matrix.astype(np.float64), p.bias.astype(np.float64)
    gi, gw, gb = pointwise_conv_backward(x, p, g)

    # the oracle differentiates a float64 loop implementation of the forward map
    def loss(x_=x, W_=W, b_=b):
        return float((conv_ref(x_, W_, b_) * g).sum())

    assert rel_error(gi, numeric_grad(lambda v: loss(x_=v), x)).max() < 1e-3
    assert rel_error(gw[:, :, 0, 0], numeric_grad(lambda v: loss(W_=v), W)).max() < 1e-3
    assert rel_error(gb, numeric_grad(lambda v: loss(b_=v), b)).max() < 1e-3


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (1, 3, 4, 4), elements=st.floats(-2, 2, width=32)), st.randoms(use_true_random=False))
def test_conv_commutes_with_pixel_permutation(x, r):
    p = ConvParams(np.arange(6.0).reshape(2, 3) / 7, np.array([0.1, -0.2]))
    perm = list(range(16))
    r.shuffle(perm)
    xp = x.reshape(1, 3, 16)[:, :, perm].reshape(x.shape)
    expect = pointwise_conv_forward(x, p).reshape(1, 2, 16)[:, :, perm].reshape(1, 2, 4, 4)
    np.testing.assert_array_equal(pointwise_conv_forward(xp, p), expect)


# -- relu ----------------------------------------------------------------------


def test_relu_examples():
    np.testing.assert_array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = np.array([0.5, 1.0, 3.0], dtype=np.float32)
    np.testing.assert_array_equal(relu_forward(x), x)


@pytest.mark.parametrize("seed", range(GRAD_CASES))
def test_relu_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-2] = 0.5  # stay off the kink
    g = rng.standard_normal(x.shape)
    num = numeric_grad(lambda v: float((np.maximum(v, 0) * g).sum()), x)
    assert rel_error(relu_backward(x, g), num).max() < 1e-3


# -- max pooling ---------------------------------------------------------------


@pytest.mark.parametrize("kernel, stride, pad", [(16, 16, 0), (20, 16, 2)])
def test_pool_table_shapes(kernel, stride, pad):
    out, _ = maxpool_forward(np.zeros((1, 160, 32, 32)), kernel, stride, pad)
    assert out.shape == (1, 160, 2, 2)


def test_pool_non_integral_size_rejected():
    with pytest.raises(ShapeError):
        pool_output_size(10, 4, 4, 0)
    with pytest.raises(ShapeError):
        maxpool_forward(np.zeros((1, 1, 10, 10)), 4, 4, 0)


def test_pool_constant_input():
    out, _ = maxpool_forward(np.full((1, 2, 8, 8), 0.3), 4, 4, 0)
    np.testing.assert_allclose(out, 0.3)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("kernel, stride, pad", [(4, 4, 0), (2, 2, 0), (6, 4, 1)])
def test_pool_matches_window_scan(seed, kernel, stride, pad):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
    out, idx = maxpool_forward(x, kernel, stride, pad)
    ref, arg = maxpool_ref(x.astype(np.float64), (kernel, kernel), stride, pad)
    np.testing.assert_allclose(out, ref, atol=1e-6)
    np.testing.assert_array_equal(idx.indices, arg)


def test_pool_padding_never_selected():
    x = np.full((1, 1, 4, 4), -5.0)
    out, _ = maxpool_forward(x, 4, 2, 1)
    np.testing.assert_array_equal(out, -5.0)


def test_pool_backward_single_winner_and_ties():
    x = np.zeros((1, 1, 2, 2), dtype=np.float32)
    x[0, 0, 1, 0] = 1.0
    _, idx = maxpool_forward(x, 2, 2, 0)
    grad = maxpool_backward(idx, np.full((1, 1, 1, 1), 3.0))
    np.testing.assert_array_equal(grad[0, 0], [[0, 0], [3, 0]])
    # all-equal window: the first pixel in scan order takes everything
    _, idx = maxpool_forward(np.ones((1, 1, 2, 2)), 2, 2, 0)
    grad = maxpool_backward(idx, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(grad[0, 0], [[1, 0], [0, 0]])


def test_pool_backward_zero_and_stale_shape():
    _, idx = maxpool_forward(np.random.default_rng(0).random((1, 2, 4, 4)), 2, 2, 0)
    assert not maxpool_backward(idx, np.zeros((1, 2, 2, 2))).any()
    with pytest.raises(ShapeError):
        maxpool_backward(idx, np.zeros((1, 2, 1, 1)))


@pytest.mark.parametrize("seed", range(GRAD_CASES))
def test_pool_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    # a random permutation of well-separated levels rules out ties within the FD step
    x = (rng.permutation(2 * 3 * 6 * 6) * 0.01).reshape(2, 3, 6, 6)
    g = rng.standard_normal((2, 3, 3, 3))
    _, idx = maxpool_forward(x, 4, 2, 1)
    num = numeric_grad(lambda v: float((maxpool_ref(v, (4, 4), 2, 1)[0] * g).sum()), x)
    assert rel_error(maxpool_backward(idx, g), num).max() < 1e-3


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (1, 2, 8, 8), elements=st.floats(-1, 1, width=32)), st.floats(-4, 4))
def test_pool_shift_equivariance(x, c):
    a, _ = maxpool_forward(x, 4, 4, 0)
    b, _ = maxpool_forward(x + np.float32(c), 4, 4, 0)
    np.testing.assert_allclose(b, a + np.float32(c), atol=1e-5)


def test_pool_windows_match_index_map():
    x = np.random.default_rng(3).random((1, 1, 8, 8)).astype(np.float32)
    win = pool_windows(8, 8, (4, 4), 4, 0)
    assert win.shape == (4, 16)
    _, idx = maxpool_forward(x, 4, 4, 0)
    flat = x.reshape(-1)
    np.testing.assert_array_equal(idx.indices.ravel(), [row[np.argmax(flat[row])] for row in win])


# -- concat / resize -----------------------------------------------------------


def test_concat_examples():
    parts = [np.full((1, 160, 2, 2), i, np.float32) for i in range(4)]
    assert concat_channels(parts).shape == (1, 640, 2, 2)
    a = np.zeros((1, 1, 2, 2))
    b = np.ones((1, 1, 2, 2))
    out = concat_channels([a, b])
    np.testing.assert_array_equal(out[:, 0], a[:, 0])
    np.testing.assert_array_equal(out[:, 1], b[:, 0])
    np.testing.assert_array_equal(concat_channels([b]), b)
    with pytest.raises(ShapeError):
        concat_channels([a, np.zeros((1, 1, 3, 3))])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2 ** 16))
def test_concat_then_slice_roundtrip(channels, seed):
    rng = np.random.default_rng(seed)
    parts = [rng.random((2, c, 3, 3)).astype(np.float32) for c in channels]
    out = concat_channels(parts)
    start = 0
    for p in parts:
        np.testing.assert_array_equal(out[:, start:start + p.shape[1]], p)
        start += p.shape[1]


def test_resize_identity_and_constant():
    x = np.random.default_rng(0).random((1, 2, 5, 7)).astype(np.float32)
    np.testing.assert_array_equal(bilinear_resize(x, (5, 7)), x)
    np.testing.assert_allclose(bilinear_resize(np.full((1, 1, 3, 3), 0.4), (8, 5)), 0.4, atol=1e-7)


def test_resize_2x2_hand_case():
    x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
    out = bilinear_resize(x, (4, 4))[0, 0]
    # half-pixel samples at -0.25, 0.25, 0.75, 1.25 clamp to 0, .25, .75, 1
    f = np.array([0.0, 0.25, 0.75, 1.0])
    expect = 2 * f[:, None] + f[None, :]
    np.testing.assert_allclose(out, expect, atol=1e-6)


@pytest.mark.parametrize("target", [(16, 16), (3, 5), (9, 4)])
def test_resize_matches_loop(rng, target):
    x = rng.random((1, 1, 8, 6))
    ref = bilinear_ref(x[0, 0], *target)
    np.testing.assert_allclose(bilinear_resize(x, target)[0, 0], ref, atol=1e-6)


# -- init and optimizer --------------------------------------------------------


@pytest.mark.parametrize("fan_in", [3, 160])
def test_msra_std(fan_in):
    w = msra_init(fan_in, (100_000,), np.random.default_rng(5))
    assert abs(w.std() / np.sqrt(2 / fan_in) - 1) < 0.02
    assert abs(w.mean()) < 0.01 * np.sqrt(2 / fan_in) * 3
    np.testing.assert_array_equal(w, msra_init(fan_in, (100_000,), np.random.default_rng(5)))


def test_sgd_zero_grad_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    sgd_step(p, {"w": np.zeros(2)}, OptimizerState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_sgd_two_step_recursion():
    p = {"w": np.array([1.0])}
    state = OptimizerState()
    sgd_step(p, {"w": np.array([1.0])}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p["w"][0] == pytest.approx(0.9)
    sgd_step(p, {"w": np.array([1.0])}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p["w"][0] == pytest.approx(0.71)
    assert state.iteration == 2
    assert state.buffers["w"].shape == p["w"].shape


def test_sgd_rejects_non_finite():
    p = {"w": np.array([1.0])}
    state = OptimizerState()
    with pytest.raises(NumericError):
        sgd_step(p, {"w": np.array([np.nan])}, state, lr=0.1)
    assert p["w"][0] == 1.0 and state.iteration == 0


@pytest.mark.parametrize("it, lr", [(0, 0.005), (9_999, 0.005), (10_000, 0.0025), (25_000, 0.00125),
                                    (45_000, 3.125e-4), (49_999, 3.125e-4), (90_000, 3.125e-4)])
def test_lr_schedule(it, lr):
    assert lr_schedule(it) == pytest.approx(lr)


def test_lr_schedule_rejects_negative():
    with pytest.raises(ValueError):
        lr_schedule(-1)
