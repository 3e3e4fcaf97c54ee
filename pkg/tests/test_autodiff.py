import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tubeanomaly import autodiff as ad
from tubeanomaly.autodiff import Parameter, Tensor, backward, grad_check


def _project(out: Tensor, seed: int = 99) -> Tensor:
    """Random linear functional so every output element gets a distinct weight."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return ad.tensor_sum(ad.mul(out, Tensor(r)))


def _param(rng, shape, name="p", scale=1.0):
    return Parameter(rng.normal(scale=scale, size=shape), name)


# ---------------------------------------------------------------- conv3d


def test_conv3d_identity_scalar():
    out = ad.conv3d(Tensor(np.full((1, 1, 1, 1), 5.0)), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert out.numpy().tolist() == [[[[5.0]]]]


def test_conv3d_zero_input_zero_output():
    rng = np.random.default_rng(0)
    out = ad.conv3d(Tensor(np.zeros((3, 4, 4, 2))), Tensor(rng.normal(size=(2, 2, 2, 2, 3))), Tensor(np.zeros(3)))
    assert not out.numpy().any()


def test_conv3d_ones_sum_to_eight():
    out = ad.conv3d(Tensor(np.ones((2, 2, 2, 1))), Tensor(np.ones((2, 2, 2, 1, 1))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 8.0


@pytest.mark.parametrize(
    "shape,k,stride,pad,expected",
    [
        ((6, 7, 8, 1), (3, 3, 3), 1, 0, (4, 5, 6)),
        ((6, 7, 8, 1), (3, 3, 3), 1, 1, (6, 7, 8)),
        ((6, 7, 8, 1), (3, 3, 3), (1, 2, 2), 1, (6, 4, 4)),
        ((5, 5, 5, 1), (2, 3, 1), 2, (0, 1, 0), (2, 3, 3)),
    ],
)
def test_conv3d_output_arithmetic(shape, k, stride, pad, expected):
    out = ad.conv3d(Tensor(np.zeros(shape)), Tensor(np.zeros(k + (1, 2))), Tensor(np.zeros(2)), stride, pad)
    assert out.shape == expected + (2,)


def test_conv3d_identity_kernel_is_bit_exact():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5, 6, 3))
    eye = np.eye(3).reshape(1, 1, 1, 3, 3)
    out = ad.conv3d(Tensor(x), Tensor(eye), Tensor(np.zeros(3)))
    assert np.array_equal(out.numpy(), x)


def test_conv3d_matches_direct_loop():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 5, 5, 2))
    k = rng.normal(size=(2, 3, 2, 2, 3))
    b = rng.normal(size=3)
    out = ad.conv3d(Tensor(x), Tensor(k), Tensor(b), stride=(1, 2, 1), padding=(0, 1, 1)).numpy()
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros(out.shape)
    for t in range(out.shape[0]):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = xp[t : t + 2, 2 * i : 2 * i + 3, j : j + 2]
                ref[t, i, j] = np.einsum("abcd,abcde->e", patch, k) + b
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_conv3d_shape_error_names_both_shapes():
    with pytest.raises(ValueError) as exc:
        ad.conv3d(Tensor(np.zeros((2, 4, 4, 3))), Tensor(np.zeros((1, 1, 1, 2, 1))), Tensor(np.zeros(1)))
    assert "(2, 4, 4, 3)" in str(exc.value) and "(1, 1, 1, 2, 1)" in str(exc.value)


def test_conv3d_kernel_larger_than_input_rejected():
    with pytest.raises(ValueError):
        ad.conv3d(Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.zeros((1, 3, 3, 1, 1))), Tensor(np.zeros(1)))


def test_conv3d_batched_equals_per_sample():
    rng = np.random.default_rng(5)
    xb = rng.normal(size=(3, 4, 6, 6, 2))
    k = Tensor(rng.normal(size=(3, 3, 3, 2, 4)))
    b = Tensor(rng.normal(size=4))
    batched = ad.conv3d(Tensor(xb), k, b, (1, 2, 2), 1).numpy()
    for n in range(3):
        single = ad.conv3d(Tensor(xb[n]), k, b, (1, 2, 2), 1).numpy()
        np.testing.assert_allclose(batched[n], single, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- conv2d_1x1 / linear / activations


def test_conv1x1_scalar_multiply():
    out = ad.conv2d_1x1(Tensor(np.full((3, 3, 1), 3.0)), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)))
    assert np.all(out.numpy() == 6.0)


def test_conv1x1_identity_and_bias():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 4, 3))
    out = ad.conv2d_1x1(Tensor(x), Tensor(np.eye(3).reshape(1, 1, 3, 3)), Tensor(np.zeros(3)))
    assert np.array_equal(out.numpy(), x)
    out = ad.conv2d_1x1(Tensor(x), Tensor(np.zeros((1, 1, 3, 2))), Tensor(np.array([1.5, -2.0])))
    assert np.all(out.numpy()[..., 0] == 1.5) and np.all(out.numpy()[..., 1] == -2.0)


def test_linear_examples():
    x = np.array([1.0, 2.0])
    assert ad.linear(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2))).numpy().tolist() == [1.0, 2.0]
    assert ad.linear(Tensor(x), Tensor(np.array([[1.0], [1.0]])), Tensor(np.array([0.5]))).numpy().tolist() == [3.5]
    b = np.array([0.25, -1.0, 3.0])
    assert np.array_equal(ad.linear(Tensor(np.zeros(4)), Tensor(np.ones((4, 3))), Tensor(b)).numpy(), b)


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        ad.linear(Tensor(np.zeros(3)), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_activation_examples():
    assert ad.apply_activation("relu", Tensor(np.array([-1.0, 0.0, 2.0]))).numpy().tolist() == [0.0, 0.0, 2.0]
    assert ad.apply_activation("sigmoid", Tensor(np.array([0.0]))).numpy().tolist() == [0.5]
    assert ad.apply_activation("sigmoid", Tensor(np.array([math.log(3.0)]))).item() == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(ValueError):
        ad.apply_activation("tanh", Tensor(np.zeros(1)))


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-800, 800)))
def test_sigmoid_open_unit_interval_and_finite(x):
    y = ad.sigmoid(Tensor(x)).numpy()
    assert np.all(np.isfinite(y)) and np.all(y >= 0.0) and np.all(y <= 1.0)
    # strictly inside (0, 1) wherever float64 can represent it
    mid = np.abs(x) < 30
    assert np.all(y[mid] > 0.0) and np.all(y[mid] < 1.0)


# ---------------------------------------------------------------- dropout


def test_dropout_identity_cases():
    x = Tensor(np.arange(6.0))
    assert ad.dropout(x, 0.7, "eval", None) is x
    assert np.array_equal(ad.dropout(x, 0.0, "train", np.random.default_rng(0)).numpy(), x.numpy())


def test_dropout_half_values_and_reproducible():
    ones = Tensor(np.ones(1000))
    a = ad.dropout(ones, 0.5, "train", np.random.default_rng(11)).numpy()
    b = ad.dropout(ones, 0.5, "train", np.random.default_rng(11)).numpy()
    assert set(np.unique(a).tolist()) <= {0.0, 2.0}
    assert np.array_equal(a, b)


def test_dropout_expectation_within_three_percent():
    rng = np.random.default_rng(2)
    out = ad.dropout(Tensor(np.full(10_000, 1.7)), 0.5, "train", rng).numpy()
    assert abs(out.mean() - 1.7) / 1.7 < 0.03


def test_dropout_rate_validation():
    with pytest.raises(ValueError):
        ad.dropout(Tensor(np.ones(3)), 1.0, "train", np.random.default_rng(0))
    with pytest.raises(ValueError):
        ad.dropout(Tensor(np.ones(3)), -0.1, "train", np.random.default_rng(0))


# ---------------------------------------------------------------- pooling


def test_temporal_avg_pool_examples():
    x = np.random.default_rng(0).normal(size=(1, 3, 3, 2))
    assert np.array_equal(ad.temporal_avg_pool(Tensor(x)).numpy(), x[0])
    two = np.stack([np.full((2, 2, 1), 2.0), np.full((2, 2, 1), 4.0)])
    assert np.all(ad.temporal_avg_pool(Tensor(two)).numpy() == 3.0)
    assert np.all(ad.temporal_avg_pool(Tensor(np.full((5, 2, 2, 2), 0.3))).numpy() == pytest.approx(0.3))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2)),
              elements=st.floats(-1e6, 1e6)))
def test_temporal_avg_pool_bounded(x):
    y = ad.temporal_avg_pool(Tensor(x)).numpy()
    assert np.all(y >= x.min(axis=0) - 1e-9 * (1 + np.abs(x).max()))
    assert np.all(y <= x.max(axis=0) + 1e-9 * (1 + np.abs(x).max()))


def test_max_pool_examples():
    x = np.array([1.0, 3.0, 2.0, 0.0]).reshape(1, 1, 4, 1)
    assert ad.max_pool3d(Tensor(x), (1, 1, 2), (1, 1, 2)).numpy().ravel().tolist() == [3.0, 2.0]
    rng = np.random.default_rng(0)
    v = rng.normal(size=(2, 3, 4, 2))
    glob = ad.max_pool3d(Tensor(v), (2, 3, 4)).numpy()
    assert np.array_equal(glob.reshape(2), v.reshape(-1, 2).max(axis=0))
    assert np.all(ad.max_pool3d(Tensor(np.full((4, 4, 4, 1), 7.0)), 2).numpy() == 7.0)


def test_max_pool_window_too_large():
    with pytest.raises(ValueError):
        ad.max_pool3d(Tensor(np.zeros((1, 2, 2, 1))), (1, 3, 3))


def test_max_pool_tie_routes_to_lowest_index():
    x = Parameter(np.ones((2, 2, 2, 1)), "x")
    backward(ad.tensor_sum(ad.max_pool3d(x, 2)))
    g = x.grad.reshape(-1)
    assert g[0] == 1.0 and g[1:].sum() == 0.0


def test_max_pool_overlapping_matches_loop():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 5, 5, 2))
    out = ad.max_pool3d(Tensor(x), (2, 3, 3), (1, 2, 2)).numpy()
    ref = np.empty(out.shape)
    for t in range(out.shape[0]):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                ref[t, i, j] = x[t : t + 2, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3].reshape(-1, 2).max(axis=0)
    assert np.array_equal(out, ref)


# ---------------------------------------------------------------- backward


def test_backward_square():
    x = Parameter(np.array(3.0), "x")
    backward(ad.mul(x, x))
    assert x.grad == 6.0


def test_backward_constant_is_zero():
    x = Parameter(np.array(3.0), "x")
    backward(Tensor(np.array(4.0)) + ad.mul(x, Tensor(np.array(0.0))))
    assert x.grad == 0.0


def test_backward_relu_chain():
    for x0, want in ((1.0, 2.0), (-1.0, 0.0)):
        x = Parameter(np.array(x0), "x")
        backward(ad.relu(ad.mul(Tensor(np.array(2.0)), x)))
        assert x.grad == want


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        backward(Parameter(np.ones(3), "x"))


def test_backward_accumulates_and_zero_grad():
    x = Parameter(np.array(2.0), "x")
    backward(ad.mul(x, x))
    backward(ad.mul(x, x))
    assert x.grad == 8.0
    x.zero_grad()
    assert x.grad == 0.0


def test_shared_subexpression_gradient():
    # y = (x + x) * x -> dy/dx = 4x
    x = Parameter(np.array(1.5), "x")
    backward(ad.mul(ad.add(x, x), x))
    assert x.grad == pytest.approx(6.0)


def test_tensor_is_read_only():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.value[0] = 2.0


def test_mse_value_and_grad():
    s = Parameter(np.array([0.2, 0.9]), "s")
    loss = ad.mse(s, [0, 1])
    assert loss.item() == pytest.approx((0.04 + 0.01) / 2)
    backward(loss)
    np.testing.assert_allclose(s.grad, [0.2, -0.1])


def test_gradients_bit_identical_between_runs():
    def run():
        rng = np.random.default_rng(21)
        x = Tensor(rng.normal(size=(4, 6, 6, 2)))
        k = Parameter(rng.normal(size=(3, 3, 3, 2, 3)), "k")
        b = Parameter(rng.normal(size=3), "b")
        y = ad.dropout(ad.relu(ad.conv3d(x, k, b, 1, 1)), 0.5, "train", np.random.default_rng(4))
        backward(_project(y))
        return k.grad.copy(), b.grad.copy()

    (k1, b1), (k2, b2) = run(), run()
    assert np.array_equal(k1, k2) and np.array_equal(b1, b2)


# ---------------------------------------------------------------- grad checks


SEEDS = range(10)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_check_conv3d(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, (3, 5, 5, 2), "x")
    k = _param(rng, (2, 3, 3, 2, 2), "k", 0.5)
    b = _param(rng, (2,), "b")
    err = grad_check(lambda: _project(ad.conv3d(x, k, b, (1, 2, 1), (1, 1, 0)), seed), [x, k, b])
    assert err < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_check_conv3d_batched(seed):
    rng = np.random.default_rng(100 + seed)
    x = _param(rng, (2, 2, 4, 4, 1), "x")
    k = _param(rng, (2, 2, 2, 1, 2), "k")
    b = _param(rng, (2,), "b")
    assert grad_check(lambda: _project(ad.conv3d(x, k, b, 1, 1), seed), [x, k, b]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_check_conv1x1(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, (3, 3, 4), "x")
    k = _param(rng, (1, 1, 4, 3), "k")
    b = _param(rng, (3,), "b")
    assert grad_check(lambda: _project(ad.conv2d_1x1(x, k, b), seed), [x, k, b]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_check_linear(seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, (3, 5), "x")
    w = _param(rng, (5, 4), "w")
    b = _param(rng, (4,), "b")
    assert grad_check(lambda: _project(ad.linear(x, w, b), seed), [x, w, b]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["relu", "sigmoid"])
def test_grad_check_activations(seed, kind):
    rng = np.random.default_rng(seed)
    # keep relu inputs off the kink so central differences are valid
    v = rng.normal(size=(4, 5))
    v = np.where(np.abs(v) < 0.05, 0.5, v)
    x = Parameter(v, "x")
    assert grad_check(lambda: _project(ad.apply_activation(kind, x), seed), [x]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_check_pools(seed):
    rng = np.random.default_rng(seed)
    # distinct values spaced well above the finite-difference step
    v = rng.permutation(4 * 4 * 4 * 2).reshape(4, 4, 4, 2) * 0.01
    x = Parameter(v, "x")
    assert grad_check(lambda: _project(ad.max_pool3d(x, 2), seed), [x]) < 1e-4
    assert grad_check(lambda: _project(ad.max_pool3d(x, (2, 3, 3), (1, 1, 1)), seed), [x]) < 1e-4
    assert grad_check(lambda: _project(ad.temporal_avg_pool(x), seed), [x]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_check_structural_ops(seed):
    rng = np.random.default_rng(seed)
    a = _param(rng, (2, 3), "a")
    b = _param(rng, (2, 2), "b")
    c = _param(rng, (3,), "c")

    def build():
        cat = ad.concat([a, b], axis=-1)
        y = ad.reshape(ad.mul(cat, cat), (10,))
        return ad.mean(y) + ad.tensor_sum(ad.add(a, c)) - ad.mse(ad.sigmoid(c), [0, 1, 0])

    assert grad_check(build, [a, b, c]) < 1e-4


def test_grad_check_constant_function_exact_zero():
    x = Parameter(np.ones(3), "x")
    assert grad_check(lambda: ad.tensor_sum(ad.mul(x, Tensor(np.zeros(3)))), [x]) == 0.0
