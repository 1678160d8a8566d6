import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from opticnet import ops
from opticnet.gradcheck import check_layer, finite_diff
from opticnet.layers import ConvSpec
from opticnet.tensor import ContractError, DimensionError, Tensor, Variable, backward

from oracles import (bilinear_pixel, conv_loop, depthwise_loop, matmul_loop, maxpool_loop,
                     pointwise_loop, softmax_ce)

T = lambda a: Tensor(np.asarray(a, dtype=np.float64))
V = lambda a: Variable(np.asarray(a, dtype=np.float64), dtype=np.float64)


def fd_check(f, var, tol=1e-6):
    backward(f())
    num = finite_diff(lambda: f().item(), var.data, 1e-5)
    assert np.abs(var.grad - num).max() / max(np.abs(num).max(), 1e-12) < tol


# ---------------------------------------------------------------- conv


def test_identity_1x1_kernel(rng):
    x = rng.standard_normal((2, 5, 5, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    assert np.array_equal(ops.conv2d(T(x), T(w)).data, x)


def test_ones_kernel_counts_window():
    out = ops.conv2d(T(np.ones((1, 5, 5, 1))), T(np.ones((3, 3, 1, 1))), padding="valid")
    assert out.shape == (1, 3, 3, 1)
    assert np.all(out.data == 9)


def test_conv_matches_direct_summation_and_fd(rng):
    x = rng.standard_normal((1, 6, 6, 3))
    w = V(rng.standard_normal((3, 3, 3, 4)))
    assert np.allclose(ops.conv2d(T(x), w).data, conv_loop(x, w.data), atol=1e-12)
    r = rng.standard_normal((1, 6, 6, 4))
    fd_check(lambda: ops.sum(ops.mul(ops.conv2d(T(x), w), T(r))), w)


@pytest.mark.parametrize("stride,dilation,padding,size", [(2, 1, "same", 7), (1, 2, "same", 6),
                                                          (2, 1, "valid", 7), (1, 1, "valid", 6),
                                                          (3, 1, "same", 8)])
def test_conv_geometry_matches_oracle(rng, stride, dilation, padding, size):
    x = rng.standard_normal((2, size, size, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    got = ops.conv2d(T(x), T(w), stride=stride, dilation=dilation, padding=padding).data
    assert np.allclose(got, conv_loop(x, w, stride, dilation, padding), atol=1e-12)


def test_atrous_equals_zero_inflated_kernel_bitwise(rng):
    x = rng.standard_normal((2, 7, 7, 4)).astype(np.float32)
    w = rng.standard_normal((2, 2, 4, 5)).astype(np.float32)
    inflated = np.zeros((3, 3, 4, 5), np.float32)
    inflated[::2, ::2] = w
    a = ops.atrous_conv2d(Tensor(x), Tensor(w), dilation=2).data
    b = ops.conv2d(Tensor(x), Tensor(inflated)).data
    assert np.array_equal(a, b)


def test_atrous_matches_strided_tap_oracle(rng):
    x = rng.standard_normal((1, 6, 5, 3))
    w = rng.standard_normal((2, 2, 3, 2))
    assert np.allclose(ops.atrous_conv2d(T(x), T(w), dilation=2).data, conv_loop(x, w, 1, 2), atol=1e-12)


def test_receptive_field_and_param_counts():
    assert ConvSpec((2, 2), 64, 64, dilation=2, kind="atrous").receptive_field == (3, 3)
    assert ConvSpec((2, 2), 64, 64, dilation=2, kind="atrous").weight_count == 16_384
    assert ConvSpec((3, 3), 64, 64, kind="separable").weight_count == 4_672
    assert ConvSpec((2, 2), 64, 64, dilation=2, kind="atrous_separable").weight_count == 4_352
    assert ConvSpec((3, 3), 64, 64).weight_count == 36_864


def test_separable_identity():
    x = np.random.default_rng(0).standard_normal((1, 5, 5, 3))
    wd = np.zeros((3, 3, 3, 1))
    wd[1, 1] = 1.0
    out = ops.separable_conv2d(T(x), T(wd), T(np.eye(3).reshape(1, 1, 3, 3)))
    assert np.array_equal(out.data, x)


@pytest.mark.parametrize("k,dilation", [(3, 1), (2, 2)])
def test_separable_matches_two_stage_oracle(rng, k, dilation):
    x = rng.standard_normal((2, 6, 6, 3))
    wd = rng.standard_normal((k, k, 3, 1))
    wp = rng.standard_normal((1, 1, 3, 4))
    got = ops.separable_conv2d(T(x), T(wd), T(wp), dilation=dilation).data
    assert np.allclose(got, pointwise_loop(depthwise_loop(x, wd, dilation), wp), atol=1e-12)
    got2 = ops.depthwise_conv2d(T(x), T(wd), dilation=dilation).data
    assert np.allclose(got2, depthwise_loop(x, wd, dilation), atol=1e-12)


def test_atrous_separable_constant_interior():
    x = np.full((1, 7, 7, 1), 2.0)
    out = ops.atrous_separable_conv2d(T(x), T(np.full((2, 2, 1, 1), 0.25)), T(np.ones((1, 1, 1, 1))))
    # same padding puts one zero row/col on each side; the rest is interior
    assert np.allclose(out.data[0, 1:6, 1:6, 0], 2.0)


@given(st.integers(1, 17), st.sampled_from([1, 2, 3]), st.sampled_from([1, 2, 3]), st.sampled_from([1, 2]))
def test_same_padding_shape_law(size, stride, k, dilation):
    x = T(np.ones((1, size, size, 1)))
    w = T(np.ones((k, k, 1, 1)))
    assert ops.conv2d(x, w, stride=stride, dilation=dilation).shape[1] == math.ceil(size / stride)
    assert ops.depthwise_conv2d(x, w, stride=stride, dilation=dilation).shape[1] == math.ceil(size / stride)


def test_conv_channel_mismatch_raises(rng):
    with pytest.raises(DimensionError):
        ops.conv2d(T(rng.standard_normal((1, 4, 4, 3))), T(rng.standard_normal((3, 3, 2, 4))))


# ---------------------------------------------------------------- pooling


def test_maxpool_small_cases():
    assert ops.max_pool2d(T(np.array([[1.0, 2], [3, 4]]).reshape(1, 2, 2, 1))).data.item() == 4
    assert np.all(ops.max_pool2d(T(np.full((1, 6, 6, 2), 3.5))).data == 3.5)


def test_maxpool_loop_oracle_and_mass_conservation(rng):
    x = V(rng.standard_normal((1, 8, 8, 3)))
    out = ops.max_pool2d(x)
    assert np.array_equal(out.data, maxpool_loop(x.data))
    g = rng.standard_normal(out.shape)
    backward(ops.sum(ops.mul(out, T(g))))
    assert math.isclose(x.grad.sum(), g.sum(), rel_tol=1e-12)


def test_maxpool_tie_goes_to_first_tap():
    x = V(np.ones((1, 2, 2, 1)))
    backward(ops.sum(ops.max_pool2d(x)))
    assert x.grad[0, :, :, 0].tolist() == [[1, 0], [0, 0]]


def test_global_avg_pool(rng):
    assert np.allclose(ops.global_avg_pool(T(np.full((2, 3, 3, 4), 1.5))).data, 1.5)
    assert ops.global_avg_pool(Tensor(np.zeros((1, 14, 14, 2048), np.float32))).shape == (1, 1, 1, 2048)
    x = rng.standard_normal((2, 3, 4, 2))
    want = np.array([[[[sum(x[b, i, j, c] for i in range(3) for j in range(4)) / 12 for c in range(2)]]]
                     for b in range(2)])
    assert np.allclose(ops.global_avg_pool(T(x)).data, want, atol=1e-14)


# ---------------------------------------------------------------- bilinear


@given(st.floats(-5, 5), st.integers(1, 5), st.integers(0, 6))
def test_bilinear_constant_stays_constant(c, size, extra):
    out = ops.bilinear_upsample(T(np.full((1, size, size, 2), c)), size + extra, size + 2 * extra)
    assert np.allclose(out.data, c, atol=1e-12)


def test_bilinear_1x1_replicates():
    out = ops.bilinear_upsample(T(np.array([7.0]).reshape(1, 1, 1, 1)), 2, 2)
    assert np.all(out.data == 7)


def test_bilinear_2x_matches_per_pixel_oracle(rng):
    x = rng.standard_normal((2, 4, 4, 3))
    out = ops.bilinear_upsample(T(x), 8, 8).data
    for i in range(8):
        for j in range(8):
            assert np.allclose(out[:, i, j], bilinear_pixel(x, i, j, 8, 8), atol=1e-14)


def test_bilinear_odd_target_and_grad(rng):
    x = V(rng.standard_normal((1, 3, 3, 2)))
    out = ops.bilinear_upsample(x, 7, 6).data
    for i in range(7):
        for j in range(6):
            assert np.allclose(out[:, i, j], bilinear_pixel(x.data, i, j, 7, 6), atol=1e-14)
    r = rng.standard_normal((1, 7, 6, 2))
    fd_check(lambda: ops.sum(ops.mul(ops.bilinear_upsample(x, 7, 6), T(r))), x)


def test_bilinear_rejects_shrink():
    with pytest.raises(ContractError):
        ops.bilinear_upsample(T(np.ones((1, 4, 4, 1))), 2, 2)


# ---------------------------------------------------------------- batch norm


def bn_args(c, dtype=np.float64):
    return V(np.ones(c)), V(np.zeros(c)), np.zeros(c, dtype), np.ones(c, dtype)


def test_bn_train_normalizes(rng):
    x = rng.standard_normal((4, 3, 3, 5)) * 3 + 2
    g, b, rm, rv = bn_args(5)
    y = ops.batch_norm(T(x), g, b, rm, rv, training=True, eps=1e-12).data
    assert np.allclose(y.mean(axis=(0, 1, 2)), 0, atol=1e-5)
    assert np.allclose(y.var(axis=(0, 1, 2)), 1, atol=1e-5)


def test_bn_infer_identity_with_unit_stats(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    g, b, rm, rv = bn_args(4)
    y = ops.batch_norm(T(x), g, b, rm, rv, training=False, eps=1e-3).data
    assert np.allclose(y, x / np.sqrt(1 + 1e-3), atol=1e-14)
    # exact identity once eps is negligible against the unit variance
    y = ops.batch_norm(T(x), g, b, rm, rv, training=False, eps=1e-300).data
    assert np.array_equal(y, x)


def test_bn_formula_oracle_running_stats_and_grad(rng):
    x = V(rng.standard_normal((3, 2, 2, 3)))
    gamma, beta = V(rng.uniform(0.5, 1.5, 3)), V(rng.standard_normal(3))
    rm, rv = np.zeros(3), np.ones(3)
    y = ops.batch_norm(x, gamma, beta, rm, rv, training=True).data
    for c in range(3):
        vals = x.data[..., c].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        want = (x.data[..., c] - mu) / math.sqrt(var + 1e-3) * gamma.data[c] + beta.data[c]
        assert np.allclose(y[..., c], want, atol=1e-12)
        assert math.isclose(rm[c], 0.01 * mu, rel_tol=1e-12)
        assert math.isclose(rv[c], 0.99 + 0.01 * var, rel_tol=1e-12)
    assert np.all(rv >= 0)
    r = rng.standard_normal(x.shape)
    for var in (x, gamma, beta):
        var.grad = None
        fd_check(lambda: ops.sum(ops.mul(ops.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), True), T(r))), var)


# ---------------------------------------------------------------- activations


def test_activation_identities(rng):
    assert ops.sigmoid(T([[0.0]])).data.item() == 0.5
    x = rng.uniform(0.01, 5, (10,))
    assert np.all(ops.relu(T(-x)).data == 0)
    z = rng.standard_normal((50,)) * 10
    assert np.allclose(ops.sigmoid(T(z)).data + ops.sigmoid(T(-z)).data, 1, atol=1e-7)


@given(arrays(np.float64, 6, elements=st.floats(-800, 800)))
def test_sigmoid_finite_in_unit_interval(x):
    s = ops.sigmoid(T(x)).data
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))


# ---------------------------------------------------------------- dense / loss


def test_dense_cases(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(ops.dense(T(x), T(np.eye(4)), T(np.zeros(4))).data, x)
    h = ops.dense(T(rng.standard_normal((2, 1, 1, 2048))), T(rng.standard_normal((2048, 256))))
    assert ops.dense(h, T(rng.standard_normal((256, 4)))).shape == (2, 4)
    w, b = rng.standard_normal((4, 3)), rng.standard_normal(3)
    assert np.allclose(ops.dense(T(x), T(w), T(b)).data, matmul_loop(x, w) + b, atol=1e-12)


def test_cross_entropy_cases(rng):
    assert math.isclose(ops.softmax_cross_entropy(T(np.zeros((1, 4))), [2]).item(), math.log(4), rel_tol=1e-12)
    big = np.array([[1000.0, 0, 0, 0]])
    assert ops.softmax_cross_entropy(T(big), [0]).item() < 1e-12
    logits = V(rng.standard_normal((5, 4)))
    labels = rng.integers(0, 4, 5)
    loss = ops.softmax_cross_entropy(logits, labels)
    assert loss.shape == (1, 1, 1, 1)
    assert math.isclose(loss.item(), softmax_ce(logits.data, labels), rel_tol=1e-12)
    backward(loss)
    p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    p[np.arange(5), labels] -= 1
    assert np.allclose(logits.grad, p / 5, atol=1e-15)


def test_cross_entropy_bad_label():
    with pytest.raises(ContractError):
        ops.softmax_cross_entropy(T(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------- every layer, FD


@pytest.mark.parametrize("name", sorted(__import__("opticnet.gradcheck", fromlist=["x"]).LAYER_PROBES))
def test_layer_probe_seed0(name):
    assert check_layer(name, 0).passed
