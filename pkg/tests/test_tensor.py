import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpae import gradcheck
from lpae import tensor as T
from lpae.errors import DegenerateInputError, NonFiniteError, ShapeError
from oracles import conv2d_naive, deconv2d_naive, grid_max_naive, softmax_xent_naive


@pytest.mark.parametrize("k, stride, size", [(3, 1, 6), (3, 2, 7), (5, 2, 8), (5, 1, 5)])
def test_conv2d_matches_loop_oracle(k, stride, size, rng):
    x = rng.normal(size=(2, 3, size, size))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride).data
    np.testing.assert_allclose(out, conv2d_naive(x, w, b, stride), atol=1e-10)
    assert out.shape[-1] == -(-size // stride)


@pytest.mark.parametrize("k, stride", [(3, 1), (3, 2), (5, 2)])
def test_deconv2d_matches_scatter_oracle(k, stride, rng):
    x = rng.normal(size=(2, 3, 4, 5))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=2)
    out = T.deconv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride).data
    assert out.shape == (2, 2, 4 * stride, 5 * stride)
    np.testing.assert_allclose(out, deconv2d_naive(x, w, b, stride), atol=1e-10)


@pytest.mark.parametrize("k, stride", [(3, 1), (3, 2), (5, 2)])
def test_deconv_is_adjoint_of_conv(k, stride, rng):
    # <conv(x), y> == <x, deconv(y)> with the same weight array
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, k, k))
    y = rng.normal(size=(2, 4, 8 // stride, 8 // stride))
    lhs = np.sum(T.conv2d(T.Tensor(x), T.Tensor(w), None, stride).data * y)
    rhs = np.sum(x * T.deconv2d(T.Tensor(y), T.Tensor(w), None, stride).data)
    assert lhs == pytest.approx(rhs, rel=1e-10)


GRAD_ROWS = gradcheck.run("op")


@pytest.mark.parametrize("name, err", GRAD_ROWS, ids=[r[0] for r in GRAD_ROWS])
def test_primitive_gradients(name, err):
    assert err <= 1e-6


def test_gradcheck_covers_every_primitive():
    names = " ".join(n for n, _ in GRAD_ROWS)
    for op in ("conv2d", "deconv2d", "relu", "batch_norm train", "batch_norm eval", "upsample_nn",
               "concat_channels", "grid_max_pool", "mse_loss", "softmax_cross_entropy",
               "linear", "add", "sub", "mul", "neg", "sum_all"):
        assert op in names


def test_grad_check_detects_wrong_backward(rng):
    def bad_relu(x):
        out = T.relu(x)
        out._backward = lambda g: (2.0 * g * (x.data > 0),)
        return out

    x = T.Tensor(rng.normal(size=(3, 4)) + 0.5, requires_grad=True)
    assert T.grad_check(lambda t: T.sum_all(bad_relu(t[0])), [x]) > 0.1


def test_gradients_accumulate_over_reuse():
    x = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = T.sum_all(T.mul(x, x) + x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_needs_a_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.sum_all(x * 3.0)
    assert not y.requires_grad
    assert y._parents == ()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.floats(-3, 3), st.floats(-3, 3))
def test_broadcast_gradients_sum_over_expanded_axes(rows, cols, av, bv):
    a = T.Tensor(np.full((rows, cols), av), requires_grad=True)
    b = T.Tensor(np.full((cols,), bv), requires_grad=True)
    T.sum_all(T.mul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.full((rows, cols), bv))
    np.testing.assert_allclose(b.grad, np.full(cols, rows * av))


def test_non_finite_results_raise():
    x = T.Tensor(np.array([1e308, 1e308]))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="mul"):
        T.mul(x, x)


def test_batch_norm_training_statistics(rng):
    x = rng.normal(loc=3.0, scale=2.0, size=(6, 2, 4, 5))
    state = T.BNState.create(2, dtype=np.float64)
    out = T.batch_norm(T.Tensor(x), state, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)
    count = 6 * 4 * 5
    mean = x.mean(axis=(0, 2, 3))
    unbiased = x.var(axis=(0, 2, 3)) * count / (count - 1)
    np.testing.assert_allclose(state.running_mean, 0.1 * mean)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * unbiased)


def test_batch_norm_eval_uses_running_statistics(rng):
    state = T.BNState.create(3, dtype=np.float64)
    state.running_mean = np.array([1.0, 2.0, 3.0])
    state.running_var = np.array([4.0, 1.0, 0.25])
    state.gamma.data = np.array([1.0, 2.0, 0.5])
    state.beta.data = np.array([0.0, -1.0, 1.0])
    x = rng.normal(size=(1, 3, 2, 2))
    out = T.batch_norm(T.Tensor(x), state, training=False).data
    expect = (x - state.running_mean[:, None, None]) / np.sqrt(state.running_var[:, None, None] + 1e-5)
    expect = expect * state.gamma.data[:, None, None] + state.beta.data[:, None, None]
    np.testing.assert_allclose(out, expect)
    np.testing.assert_array_equal(state.running_mean, [1.0, 2.0, 3.0])


def test_batch_norm_training_needs_two_samples():
    with pytest.raises(DegenerateInputError):
        T.batch_norm(T.Tensor(np.ones((1, 2, 3, 3))), T.BNState.create(2), training=True)


@pytest.mark.parametrize("values, size", [(4, (5, 7)), (9, (6, 6)), (16, (8, 8)), (24, (6, 9)),
                                          (16, (5, 4))])
def test_grid_max_pool_matches_oracle(values, size, rng):
    x = rng.normal(size=(2, 3, *size))
    rows, cols = T.grid_shape(values)
    if rows > size[0] or cols > size[1]:
        with pytest.raises(DegenerateInputError):
            T.grid_max_pool(T.Tensor(x), values)
        return
    out = T.grid_max_pool(T.Tensor(x), values).data
    assert out.shape == (2, 3 * values)
    np.testing.assert_array_equal(out, grid_max_naive(x, rows, cols))


def test_grid_shapes():
    assert [T.grid_shape(v) for v in (4, 9, 16, 24)] == [(2, 2), (3, 3), (4, 4), (4, 6)]
    with pytest.raises(ValueError):
        T.grid_shape(12)


def test_softmax_cross_entropy_matches_naive(rng):
    logits = rng.normal(size=(7, 5))
    labels = rng.integers(0, 5, size=7)
    loss = T.softmax_cross_entropy(T.Tensor(logits), labels).item()
    assert loss == pytest.approx(softmax_xent_naive(logits, labels), rel=1e-12)


def test_softmax_cross_entropy_is_stable():
    logits = np.array([[1000.0, 0.0], [0.0, -1000.0]])
    loss = T.softmax_cross_entropy(T.Tensor(logits), [1, 1]).item()
    assert loss == pytest.approx(1000.0, rel=1e-9)


def test_mse_is_a_mean(rng):
    a, b = rng.normal(size=(2, 3, 4))
    assert T.mse_loss(T.Tensor(a), b).item() == pytest.approx(np.mean((a - b) ** 2))
    with pytest.raises(ShapeError):
        T.mse_loss(T.Tensor(a), b[:2])


def test_upsample_and_concat_shapes(rng):
    a = T.Tensor(rng.normal(size=(2, 3, 4, 4)))
    up = T.upsample_nn(a)
    assert up.shape == (2, 3, 8, 8)
    np.testing.assert_array_equal(up.data[:, :, 1::2, ::2], a.data)
    with pytest.raises(ShapeError):
        T.concat_channels(a, up)


@pytest.mark.parametrize("shape_x, shape_w", [((1, 3, 4, 4), (2, 4, 3, 3)), ((1, 3, 4, 4), (2, 3, 3, 5))])
def test_conv_shape_errors(shape_x, shape_w):
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.zeros(shape_x)), T.Tensor(np.zeros(shape_w)))
