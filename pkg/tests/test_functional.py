"""Layer forwards against brute-force references, plus their documented edge cases."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from resemote import functional as F
from resemote.gradcheck import gradcheck
from resemote.tensor import NonFiniteError, Parameter, Tensor


def T(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), dtype=dtype)


# ---------------------------------------------------------------- reference implementations


def conv_reference(x, w, b, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(n):
        for o in range(cout):
            for y in range(oh):
                for z in range(ow):
                    acc = b[o]
                    for c in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[i, c, y * stride + p, z * stride + q] * w[o, c, p, q]
                    out[i, o, y, z] = acc
    return out


def maxpool_reference(x, k):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // k, w // k))
    for i in range(n):
        for j in range(c):
            for y in range(h // k):
                for z in range(w // k):
                    out[i, j, y, z] = max(x[i, j, y * k + p, z * k + q] for p in range(k) for q in range(k))
    return out


def matmul_reference(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[i, o] = b[o] + sum(x[i, k] * w[o, k] for k in range(x.shape[1]))
    return out


# ---------------------------------------------------------------- conv2d


def test_conv_all_ones_counts_window_overlap():
    out = F.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), T([0.0]), 1, 1).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_zero_weights_give_zero():
    x = T(np.random.default_rng(0).standard_normal((2, 3, 5, 5)))
    out = F.conv2d(x, T(np.zeros((4, 3, 3, 3))), T(np.zeros(4)), 1, 1)
    assert not out.data.any()


@pytest.mark.parametrize("seed", range(3))
def test_conv_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = F.conv2d(T(x, np.float32), T(w, np.float32), T(b, np.float32), stride=2, padding=1)
    assert out.shape == (2, 4, 4, 4)
    assert np.abs(out.data - conv_reference(x, w, b, 2, 1)).max() <= 1e-5


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        F.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))), T([0.0]))


# ---------------------------------------------------------------- batch norm


def test_bn_constant_channel_normalizes_to_zero():
    out = F.batch_norm2d(T(np.full((2, 1, 3, 3), 7.0)), T([1.0]), T([0.0]), F.RunningStats.fresh(1), True)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_bn_zero_gamma_emits_beta():
    x = T(np.random.default_rng(1).standard_normal((2, 2, 3, 3)))
    out = F.batch_norm2d(x, T([0.0, 0.0]), T([5.0, 5.0]), F.RunningStats.fresh(2), True)
    np.testing.assert_array_equal(out.data, 5.0)


def test_bn_train_output_has_unit_moments():
    x = np.random.default_rng(2).standard_normal((4, 3, 5, 5)) * 3 + 2
    out = F.batch_norm2d(T(x), T(np.ones(3)), T(np.zeros(3)), F.RunningStats.fresh(3, np.float64), True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_bn_running_stats_update_and_eval_uses_them():
    x = np.random.default_rng(3).standard_normal((4, 2, 3, 3))
    stats = F.RunningStats.fresh(2, np.float64)
    F.batch_norm2d(T(x), T(np.ones(2)), T(np.zeros(2)), stats, True, momentum=0.1)
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(stats.mean, 0.1 * m)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * v)
    out = F.batch_norm2d(T(x), T(np.ones(2)), T(np.zeros(2)), stats, False, eps=1e-5).data
    ref = (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_bn_overflow_is_a_numeric_error():
    with pytest.raises(NonFiniteError):
        F.batch_norm2d(T(np.array([-1e300, 1e300]).reshape(1, 1, 1, 2)), T([1.0]), T([0.0]),
                       F.RunningStats.fresh(1, np.float64), True)


# ---------------------------------------------------------------- activations


def test_relu_values():
    np.testing.assert_array_equal(F.relu(T([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_sigmoid_values_and_saturation():
    assert F.sigmoid(T([0.0])).data[0] == 0.5
    big = F.sigmoid(T([-800.0, 800.0])).data
    assert np.isfinite(big).all() and big[0] >= 0 and big[1] <= 1


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
@settings(max_examples=50, deadline=None)
def test_sigmoid_strictly_inside_unit_interval_for_moderate_inputs(a):
    s = F.sigmoid(T(a)).data
    assert (s > 0).all() and (s < 1).all()


def test_sigmoid_gradient_finite_difference():
    x = T(np.random.default_rng(4).standard_normal(12))
    assert gradcheck(lambda: F.sigmoid(x), [x]).max_rel_error <= 1e-4


# ---------------------------------------------------------------- pooling


def test_maxpool_small():
    assert F.max_pool2d(T([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 4.0


def test_maxpool_ties_route_to_first_window_element():
    x = Parameter("x", np.full((1, 1, 2, 2), 3.0))
    F.max_pool2d(x).backward(np.ones((1, 1, 1, 1), dtype=np.float32))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_maxpool_matches_windows():
    x = np.random.default_rng(5).standard_normal((1, 2, 6, 6))
    np.testing.assert_array_equal(F.max_pool2d(T(x)).data, maxpool_reference(x, 2))


def test_maxpool_requires_divisible_input():
    with pytest.raises(ValueError):
        F.max_pool2d(T(np.zeros((1, 1, 3, 4))))


@pytest.mark.parametrize("pool", [F.global_average_pool, lambda x: F.adaptive_average_pool(x, 1, 1)])
def test_average_pools(pool):
    assert pool(T(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))).data.item() == 2.0
    one = np.random.default_rng(6).standard_normal((2, 3, 1, 1))
    np.testing.assert_array_equal(pool(T(one)).data.reshape(2, 3), one.reshape(2, 3))
    x = np.random.default_rng(7).standard_normal((2, 3, 5, 4))
    direct = np.array([[sum(x[i, c].ravel()) / 20 for c in range(3)] for i in range(2)])
    np.testing.assert_allclose(pool(T(x)).data.reshape(2, 3), direct, atol=1e-6)


def test_adaptive_pool_general_bins():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = F.adaptive_average_pool(T(x), 2, 2).data[0, 0]
    np.testing.assert_array_equal(out, [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ValueError):
        F.adaptive_average_pool(T(x), 5, 1)


# ---------------------------------------------------------------- channel scale / add / linear


def test_channel_scale_identity_and_halving():
    x = np.random.default_rng(8).standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(F.channel_scale(T(x), T(np.ones((2, 3, 1, 1)))).data, x)
    np.testing.assert_array_equal(F.channel_scale(T(x), T(np.full((2, 3, 1, 1), 0.5))).data, x / 2)


def test_channel_scale_gradient_both_inputs():
    rng = np.random.default_rng(9)
    x, w = T(rng.standard_normal((2, 3, 4, 4))), T(rng.uniform(0.1, 0.9, (2, 3, 1, 1)))
    assert gradcheck(lambda: F.channel_scale(x, w), [x, w]).max_rel_error <= 1e-4


def test_add_values_and_gradient_passthrough():
    a, b = Parameter("a", [1.0, 2.0]), Parameter("b", [3.0, 4.0])
    out = F.add(a, b)
    np.testing.assert_array_equal(out.data, [4, 6])
    np.testing.assert_array_equal(F.add(a, Tensor(np.zeros(2))).data, a.data)
    g = np.array([0.25, -3.0], dtype=np.float32)
    out.backward(g)
    np.testing.assert_array_equal(a.grad, g)
    np.testing.assert_array_equal(b.grad, g)


def test_linear_identity_and_bias_only():
    x = np.random.default_rng(10).standard_normal((3, 4))
    np.testing.assert_array_equal(F.linear(T(x), T(np.eye(4)), T(np.zeros(4))).data, x)
    b = np.array([1.0, -2.0])
    np.testing.assert_array_equal(F.linear(T(x), T(np.zeros((2, 4))), T(b)).data, np.tile(b, (3, 1)))


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(11)
    x, w, b = rng.standard_normal((5, 6)), rng.standard_normal((4, 6)), rng.standard_normal(4)
    out = F.linear(T(x, np.float32), T(w, np.float32), T(b, np.float32)).data
    assert np.abs(out - matmul_reference(x, w, b)).max() <= 1e-5


# ---------------------------------------------------------------- loss


def test_xent_uniform_logits():
    loss, probs = F.softmax_cross_entropy(T(np.zeros((1, 7))), [3])
    np.testing.assert_allclose(probs, 1 / 7)
    assert abs(loss.item() - math.log(7)) < 1e-12
    assert abs(loss.item() - 1.945910) < 1e-6


def test_xent_saturated_logit_does_not_overflow():
    logits = np.zeros((1, 7))
    logits[0, 2] = 1000.0
    loss, _ = F.softmax_cross_entropy(T(logits), [2])
    assert 0.0 <= loss.item() < 1e-12


def test_xent_gradient_finite_difference():
    rng = np.random.default_rng(12)
    logits = T(rng.standard_normal((3, 7)))
    labels = rng.integers(0, 7, 3)
    assert gradcheck(lambda: F.softmax_cross_entropy(logits, labels)[0], [logits]).max_rel_error <= 1e-4


def test_xent_rejects_bad_labels():
    with pytest.raises(ValueError):
        F.softmax_cross_entropy(T(np.zeros((2, 7))), [0, 7])


@given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(logits):
    p = F.softmax(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
    assert (p >= 0).all()
