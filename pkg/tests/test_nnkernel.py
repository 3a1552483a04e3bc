import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepconn.nnkernel import (ConvLayer, DenseLayer, FeatureMaps, ParameterSet, StaleCacheError, Tower,
                               conv_forward, dense_forward, dropout, grad_check, maxpool, numeric_gradient,
                               relative_error, tower_backward)
from oracles import naive_conv, naive_maxpool


def conv(kernels, biases):
    return ConvLayer(np.asarray(kernels, dtype=float), np.asarray(biases, dtype=float))


# -- convolution ------------------------------------------------------------------

def test_conv_all_ones():
    fm = conv_forward(np.ones((2, 3)), conv(np.ones((1, 2, 2)), [0.0]))
    np.testing.assert_array_equal(fm.values, [[4.0, 4.0]])


def test_conv_negative_bias_clamped():
    fm = conv_forward(np.ones((2, 3)), conv(np.ones((1, 2, 2)), [-5.0]))
    np.testing.assert_array_equal(fm.values, [[0.0, 0.0]])


def test_conv_zero_kernel():
    V = np.random.default_rng(0).normal(size=(3, 6))
    fm = conv_forward(V, conv(np.zeros((2, 3, 2)), [0.0, 0.0]))
    assert not fm.values.any()


def test_conv_too_narrow():
    with pytest.raises(ValueError):
        conv_forward(np.ones((2, 1)), conv(np.ones((1, 2, 2)), [0.0]))


@settings(max_examples=60, deadline=None)
@given(c=st.integers(1, 4), n=st.integers(1, 9), t=st.integers(1, 4), n1=st.integers(1, 3),
       pad=st.integers(0, 9), seed=st.integers(0, 10**6))
def test_conv_matches_naive(c, n, t, n1, pad, seed):
    if t > n:
        return
    rng = np.random.default_rng(seed)
    mask = np.ones(n)
    mask[max(n - pad, 0):] = 0.0
    V = rng.normal(size=(c, n)) * mask
    layer = conv(rng.normal(size=(n1, c, t)), rng.normal(size=n1))
    fm = conv_forward(V, layer, mask)
    values, valid = naive_conv(V, layer.kernels, layer.biases, mask)
    assert fm.values.shape == (n1, n - t + 1)
    np.testing.assert_allclose(fm.values, values, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(fm.valid, valid)
    assert np.all(fm.values >= 0)
    pooled = maxpool(fm)
    ref, arg = naive_maxpool(values, valid)
    np.testing.assert_allclose(pooled, ref, rtol=0, atol=1e-12)


# -- pooling ----------------------------------------------------------------------

def fmaps(z, valid=None):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    valid = np.ones(z.shape[-1], dtype=bool) if valid is None else np.asarray(valid)
    return FeatureMaps(z, z, valid)


def test_maxpool_definition():
    fm = fmaps([3, 1, 2])
    assert maxpool(fm)[0] == 3 and fm.argmax[0] == 0


def test_maxpool_tie_lowest_index():
    fm = fmaps([2, 2])
    maxpool(fm)
    assert fm.argmax[0] == 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=8), st.randoms(use_true_random=False))
def test_maxpool_permutation_invariant(z, rnd):
    perm = list(z)
    rnd.shuffle(perm)
    assert maxpool(fmaps(z))[0] == maxpool(fmaps(perm))[0]


def test_maxpool_skips_invalid_windows_and_all_masked():
    fm = fmaps([1.0, 5.0], valid=[True, False])
    assert maxpool(fm)[0] == 1.0
    empty = fmaps([0.0, 0.0], valid=[False, False])
    assert maxpool(empty)[0] == 0.0 and empty.argmax[0] == -1


def test_pooled_size_independent_of_length():
    rng = np.random.default_rng(0)
    layer = ConvLayer.init(3, 2, 5, rng)
    for n in (2, 7, 40):
        assert maxpool(conv_forward(rng.normal(size=(3, n)), layer)).shape == (5,)


# -- dense & dropout --------------------------------------------------------------

def test_dense_identity():
    O = np.array([0.5, 2.0, 0.0])
    np.testing.assert_array_equal(dense_forward(O, DenseLayer(np.eye(3), np.zeros(3))), O)


def test_dense_clamp():
    assert not dense_forward(np.ones(2), DenseLayer(np.zeros((3, 2)), -np.ones(3))).any()


def test_dense_hand_value():
    np.testing.assert_array_equal(dense_forward(np.array([1.0, 1.0]),
                                                DenseLayer(np.array([[1.0, 2.0]]), np.array([0.5]))), [3.5])


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        dense_forward(np.ones(3), DenseLayer(np.ones((1, 2)), np.zeros(1)))


def test_dropout_identity_cases():
    x = np.random.default_rng(0).normal(size=10)
    assert dropout(x, 0.0, "train", np.random.default_rng(1))[0] is x
    assert dropout(x, 0.7, "eval")[0] is x


def test_dropout_expectation():
    x = np.array([1.0, -2.0, 3.0])
    rng = np.random.default_rng(0)
    samples = np.stack([dropout(x, 0.5, "train", rng)[0] for _ in range(100_000)])
    np.testing.assert_allclose(samples.mean(axis=0), x, rtol=0.02)


@pytest.mark.parametrize("rate", [-0.1, 1.0])
def test_dropout_rate_validation(rate):
    with pytest.raises(ValueError):
        dropout(np.ones(2), rate, "train", np.random.default_rng(0))


# -- backward ---------------------------------------------------------------------

def tiny_tower(seed, c=3, t=2, n1=4, n2=3, dropout_rate=0.0):
    rng = np.random.default_rng(seed)
    tower = Tower.init(c, t, n1, n2, rng, dropout_rate)
    tower.conv.biases[:] = rng.uniform(0.5, 1.0, n1)
    tower.dense.bias[:] = rng.uniform(0.5, 1.0, n2)
    return tower, rng


def test_zero_upstream_gives_zero_gradients():
    tower, rng = tiny_tower(0)
    V = rng.normal(size=(2, 3, 6))
    x, cache = tower.forward(V, np.ones((2, 6)))
    grads, dV = tower_backward(cache, np.zeros_like(x), input_grad=True)
    assert all(not g.any() for g in grads.values()) and not dV.any()


def test_single_window_kernel_gradient():
    tower, rng = tiny_tower(1, n1=1, n2=1)
    V = rng.normal(size=(1, 3, 2))
    x, cache = tower.forward(V, np.ones((1, 2)))
    grads, _ = tower_backward(cache, np.ones_like(x))
    routed = tower.dense.weight[0, 0] * float(cache.hidden_pre[0, 0] > 0) * float(cache.fm.pre[0, 0, 0] > 0)
    np.testing.assert_allclose(grads["conv.kernels"][0], routed * V[0], atol=1e-15)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("padded", [False, True])
def test_tower_backward_matches_finite_differences(seed, padded):
    tower, rng = tiny_tower(seed)
    B, n = 2, 6
    mask = np.ones((B, n))
    if padded:
        mask[1, 3:] = 0.0
    V = rng.normal(size=(B, 3, n)) * mask[:, None, :]
    up = rng.normal(size=(B, 3))

    def loss():
        x, _ = tower.forward(V, mask)
        return float(np.sum(x * up))

    x, cache = tower.forward(V, mask)
    grads, dV = tower_backward(cache, up, input_grad=True)
    res = grad_check(loss, tower.parameters(), grads)
    assert res.max_error < 1e-6, res.errors
    # padding is not an input: its gradient is defined as zero
    numeric_dV = numeric_gradient(loss, V) * mask[:, None, :]
    assert relative_error(dV, numeric_dV) < 1e-6
    assert not (dV * (1 - mask[:, None, :])).any()


def test_tower_backward_with_frozen_dropout_mask():
    tower, rng = tiny_tower(5, dropout_rate=0.4)
    V, mask = rng.normal(size=(3, 3, 5)), np.ones((3, 5))
    up = rng.normal(size=(3, 3))

    def loss():
        x, _ = tower.forward(V, mask, "train", np.random.default_rng(11))
        return float(np.sum(x * up))

    _, cache = tower.forward(V, mask, "train", np.random.default_rng(11))
    grads, _ = tower_backward(cache, up)
    assert grad_check(loss, tower.parameters(), grads).max_error < 1e-6


def test_mismatched_cache_rejected():
    tower, rng = tiny_tower(2)
    x, cache = tower.forward(rng.normal(size=(2, 3, 4)), np.ones((2, 4)))
    with pytest.raises(StaleCacheError):
        tower_backward(cache, np.ones((3, 3)))
    tower.dense.weight = np.zeros((2, 4))
    with pytest.raises(StaleCacheError):
        tower_backward(cache, np.ones_like(x))


# -- gradient checker -------------------------------------------------------------

def test_grad_check_linear_layer():
    rng = np.random.default_rng(0)
    W, b, O = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4)

    def loss():
        return float(np.sum(W @ O + b))

    analytic = {"W": np.tile(O, (3, 1)), "b": np.ones(3)}
    assert grad_check(loss, {"W": W, "b": b}, analytic).max_error < 1e-9


def test_grad_check_corrupted_gradient_is_one_third():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3, 3))

    def loss():
        return float(np.sum(W ** 2))

    res = grad_check(loss, {"W": W}, {"W": 2 * (2 * W)}, tolerance=1e-6)
    assert res.max_error == pytest.approx(1 / 3, rel=1e-6)
    assert not res.passed and res.worst == "W"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_nonfinite_names_parameter():
    W = np.ones(2)

    def loss():
        return float(np.sum(np.log(W - 1.0)))

    with pytest.raises(FloatingPointError, match="W"):
        grad_check(loss, {"W": W}, {"W": np.zeros(2)})


def test_relative_error_floor():
    assert relative_error(np.full(3, 1e-17), np.zeros(3)) < 1e-8


def test_parameter_set_congruence():
    ps = ParameterSet()
    ps.add("a", np.ones((2, 3)))
    ps.add_all("t", {"w": np.zeros(4)})
    assert ps.names() == ["a", "t.w"] and ps.size() == 10
    assert all(ps.grads[k].shape == ps.params[k].shape == ps.accum[k].shape for k in ps)
    ps.accumulate("t", {"w": np.ones(4)})
    ps.zero_grad()
    assert not ps.grads["t.w"].any()
    with pytest.raises(KeyError):
        ps.add("a", np.ones(1))
