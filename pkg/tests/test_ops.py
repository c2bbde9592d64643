import numpy as np
import pytest
from hypothesis import given, strategies as st

from retro import ops
from retro.autograd import DegenerateInputError, ShapeError, Tensor

from conftest import grad_check, leaf


def naive_conv_nchw(x, k, stride, pad):
    """Direct six-loop cross-correlation in f64."""
    B, C, H, W = x.shape
    F, _, kh, kw = k.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for b in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, f, i, j] = (patch * k[f]).sum()
    return out


@pytest.mark.parametrize("stride,pad,k,size", [(1, 1, 3, 6), (2, 1, 4, 8), (4, 2, 8, 8),
                                               (1, 0, 1, 5), (2, 0, 2, 6)])
def test_conv_matches_direct_loop(rng, stride, pad, k, size):
    x = rng.standard_normal((2, 3, size, size)).astype(np.float32)
    kern = rng.standard_normal((4, 3, k, k)).astype(np.float32)
    got = ops.conv2d(Tensor(x), Tensor(kern), stride, pad).data
    np.testing.assert_allclose(got, naive_conv_nchw(x, kern, stride, pad), rtol=1e-4, atol=1e-4)


def test_conv_nhwc_agrees_with_nchw(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    kern = rng.standard_normal((5, 3, 4, 4)).astype(np.float32)
    a = ops.conv2d(Tensor(x), Tensor(kern), 2, 1).data
    b = ops.conv2d(Tensor(x.transpose(0, 2, 3, 1)), Tensor(kern), 2, 1, layout="NHWC").data
    np.testing.assert_allclose(a, b.transpose(0, 3, 1, 2), rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("size,k,stride,pad", [(32, 3, 2, 1), (7, 2, 2, 0), (5, 4, 3, 0)])
def test_non_integer_output_size_raises(size, k, stride, pad):
    with pytest.raises(ShapeError, match="non-integer"):
        ops.conv_output_size(size, k, stride, pad)


def test_kernel_larger_than_input_raises():
    with pytest.raises(ShapeError, match="larger"):
        ops.conv_output_size(2, 5, 1, 0)


def test_conv_channel_mismatch_raises(rng):
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 1, 1))))


def test_batchnorm_train_normalises_and_updates_running_stats(rng):
    x = rng.normal(3.0, 2.0, size=(16, 4, 3, 3)).astype(np.float32)
    rm, rv = np.zeros(4, np.float32), np.ones(4, np.float32)
    y = ops.batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    xs = x.transpose(1, 0, 2, 3).reshape(4, -1).astype(np.float64)
    np.testing.assert_allclose(rm, 0.1 * xs.mean(1), rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * xs.var(1, ddof=1), rtol=1e-5)


def test_batchnorm_without_stat_update_leaves_buffers(rng):
    rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
    ops.batchnorm(Tensor(rng.random((8, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv,
                  True, update_stats=False)
    assert (rm == 0).all() and (rv == 1).all()


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((5, 2)).astype(np.float32)
    rm, rv = np.array([1.0, -1.0], np.float32), np.array([4.0, 0.25], np.float32)
    gamma, beta = np.array([2.0, 1.0]), np.array([0.5, 0.0])
    y = ops.batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, False).data
    expect = (x - rm) / np.sqrt(rv + ops.BN_EPS) * gamma + beta
    np.testing.assert_allclose(y, expect, rtol=1e-5)


def test_batchnorm_train_needs_two_samples():
    with pytest.raises(ShapeError):
        ops.batchnorm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                      np.zeros(3, np.float32), np.ones(3, np.float32), True)


def test_l2_normalize_rejects_zero_rows():
    with pytest.raises(DegenerateInputError, match="indices \\[1\\]"):
        ops.l2_normalize(Tensor(np.array([[1.0, 0.0], [0.0, 0.0]])))


@given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 2**31 - 1))
def test_l2_normalize_yields_unit_rows(n, d, seed):
    x = np.random.default_rng(seed).standard_normal((n, d)) + 0.1
    y = ops.l2_normalize(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1, atol=1e-6)


def test_cross_entropy_matches_brute_force(rng):
    logits = rng.standard_normal((6, 5)) * 10
    targets = rng.integers(0, 5, 6)
    expect = np.mean([-np.log(np.exp(r[t]) / np.exp(r).sum()) for r, t in zip(logits, targets)])
    assert ops.cross_entropy(Tensor(logits), targets).item() == pytest.approx(expect, rel=1e-6)


def test_cross_entropy_survives_huge_logits():
    loss = ops.cross_entropy(Tensor(np.array([[1e4, 0.0, -1e4]])), np.array([1]))
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(1e4, rel=1e-6)


def test_global_avg_pool_layouts_agree(rng):
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    a = ops.global_avg_pool(Tensor(x)).data
    b = ops.global_avg_pool(Tensor(x.transpose(0, 2, 3, 1)), layout="NHWC").data
    np.testing.assert_allclose(a, x.mean(axis=(2, 3)), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_shape_errors():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        ops.cross_entropy(Tensor(np.ones((2, 3))), np.array([0]))


# --- gradient properties ------------------------------------------------------

@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 5))
def test_matmul_and_linear_gradients(seed, n, d):
    rng = np.random.default_rng(seed)
    a, b, w, bias = leaf(rng, (n, d)), leaf(rng, (d, 3)), leaf(rng, (2, d)), leaf(rng, (2,))
    assert grad_check(lambda: ops.sum(ops.matmul(a, b)), [a, b]) < 1e-3
    weights = Tensor(rng.standard_normal((n, 2)))
    assert grad_check(lambda: ops.sum(ops.mul(ops.linear(a, w, bias), weights)), [a, w, bias]) < 1e-3


@given(st.integers(0, 2**31 - 1), st.sampled_from([(1, 1, 3), (2, 1, 4), (2, 0, 2), (1, 0, 1)]))
def test_conv_gradient(seed, geom):
    stride, pad, k = geom
    rng = np.random.default_rng(seed)
    x, kern = leaf(rng, (2, 2, 4, 4)), leaf(rng, (3, 2, k, k))
    ho = ops.conv_output_size(4, k, stride, pad)
    weights = Tensor(rng.standard_normal((2, 3, ho, ho)))
    fn = lambda: ops.sum(ops.mul(ops.conv2d(x, kern, stride, pad), weights))
    assert grad_check(fn, [x, kern]) < 1e-3


@given(st.integers(0, 2**31 - 1), st.booleans())
def test_batchnorm_gradient(seed, training):
    rng = np.random.default_rng(seed)
    x, gamma, beta = leaf(rng, (4, 3, 2, 2)), leaf(rng, (3,)), leaf(rng, (3,))
    rm, rv = np.full(3, 0.2, np.float32), np.full(3, 1.5, np.float32)
    weights = Tensor(rng.standard_normal((4, 3, 2, 2)))
    fn = lambda: ops.sum(ops.mul(ops.batchnorm(x, gamma, beta, rm, rv, training,
                                               update_stats=False), weights))
    assert grad_check(fn, [x, gamma, beta]) < 1e-3


@given(st.integers(0, 2**31 - 1))
def test_elementwise_and_shape_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, (3, 4), away_from_zero=0.05), leaf(rng, (3, 4))
    w = Tensor(rng.standard_normal((4, 3)))
    assert grad_check(lambda: ops.sum(ops.mul(ops.relu(a), b)), [a, b]) < 1e-3
    assert grad_check(lambda: ops.sum(ops.mul(ops.transpose(ops.sub(a, b)), w)), [a, b]) < 1e-3
    assert grad_check(lambda: ops.mean(ops.concat([a, ops.scale(b, 2.0)], axis=1)), [a, b]) < 1e-3
    p = leaf(rng, (2, 3, 4, 5))
    wp = Tensor(rng.standard_normal((2, 4, 5, 3)))
    assert grad_check(lambda: ops.sum(ops.mul(ops.permute(p, (0, 2, 3, 1)), wp)), [p]) < 1e-3


@given(st.integers(0, 2**31 - 1))
def test_normalisation_softmax_and_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (3, 5))
    w = Tensor(rng.standard_normal((3, 5)))
    assert grad_check(lambda: ops.sum(ops.mul(ops.l2_normalize(x), w)), [x]) < 1e-3
    assert grad_check(lambda: ops.sum(ops.mul(ops.log_softmax(x), w)), [x]) < 1e-3
    assert grad_check(lambda: ops.cross_entropy(x, np.array([0, 4, 2])), [x]) < 1e-3
    assert grad_check(lambda: ops.sum(ops.mul(ops.rowdot(x, w), Tensor(np.ones((3, 1))))), [x]) < 1e-3
    assert grad_check(lambda: ops.mean(ops.sum_squares_rows(x)), [x]) < 1e-3
    y = leaf(rng, (2, 3, 3, 4))
    wy = Tensor(rng.standard_normal((2, 4)))
    assert grad_check(lambda: ops.sum(ops.mul(ops.global_avg_pool(y, "NHWC"), wy)), [y]) < 1e-3
