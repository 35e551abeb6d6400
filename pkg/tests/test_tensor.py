import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from r2b.tensor import (ShapeError, Tensor, batchnorm2d, col2im, conv2d_ref, global_avg_pool, im2col, linear,
                        log_softmax, max_pool2d, no_grad, one_hot, prelu, softmax_cross_entropy)
from conftest import naive_conv2d, numeric_grad


def _grad(fn, *arrays):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    return [l.grad for l in leaves]


def test_float_dtypes():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


def test_broadcast_grad_reduces_to_operand_shape(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    ga, gb = _grad(lambda a, b: (a * b + b).sum(), a, b)
    assert gb.shape == (1, 4)
    np.testing.assert_allclose(gb, (a + 1).sum(axis=0, keepdims=True))
    np.testing.assert_allclose(ga, np.broadcast_to(b, a.shape))


@pytest.mark.parametrize("op", ["div", "pow", "exp", "log", "sigmoid", "abs"])
def test_elementwise_grads(op, rng):
    x = rng.uniform(0.5, 2.0, (2, 3))
    fns = {"div": lambda t: (t / (t + 1.0)).sum(), "pow": lambda t: (t ** 3).sum(),
           "exp": lambda t: t.exp().sum(), "log": lambda t: t.log().sum(),
           "sigmoid": lambda t: t.sigmoid().sum(), "abs": lambda t: t.abs().sum()}
    (g,) = _grad(fns[op], x)
    np.testing.assert_allclose(g, numeric_grad(lambda a: fns[op](Tensor(a)).item(), x.copy()), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 1), (2, 0, 3)])
def test_conv_matches_direct_loops(stride, pad, k, rng):
    x, w = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, k, k))
    out = conv2d_ref(Tensor(x), Tensor(w), stride, pad).data
    np.testing.assert_allclose(out, naive_conv2d(x, w, stride, pad), rtol=1e-10, atol=1e-10)


def test_conv_grads(rng):
    x, w = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    proj = rng.standard_normal((2, 3, 3, 3))
    f = lambda x, w: (conv2d_ref(x, w, 2, 1) * Tensor(proj)).sum()
    gx, gw = _grad(f, x, w)
    np.testing.assert_allclose(gx, numeric_grad(lambda a: f(Tensor(a), Tensor(w)).item(), x.copy()), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gw, numeric_grad(lambda a: f(Tensor(x), Tensor(a)).item(), w.copy()), rtol=1e-6, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 7), st.sampled_from([1, 3]),
       st.sampled_from([1, 2]), st.integers(0, 1), st.integers(0, 2**31 - 1))
def test_col2im_is_adjoint_of_im2col(n, c, size, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, size, size))
    cols, ho, wo = im2col(x, k, stride, pad)
    y = r.standard_normal(cols.shape)
    lhs = float((cols * y).sum())
    rhs = float((x * col2im(y, x.shape, k, stride, pad)).sum())
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d_ref(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))), 1, 1)


def test_max_pool_values_and_grad(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    out = max_pool2d(Tensor(x), 3, 2, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    expect = np.array([[[[xp[0, c, i * 2:i * 2 + 3, j * 2:j * 2 + 3].max() for j in range(3)] for i in range(3)]
                        for c in range(2)]])
    np.testing.assert_array_equal(out, expect)
    (g,) = _grad(lambda t: max_pool2d(t, 3, 2, 1).sum(), x)
    assert g.sum() == pytest.approx(out.size)


def test_batchnorm_train_stats_and_running_update(rng):
    x = rng.standard_normal((8, 3, 4, 4)) * 2 + 1
    rm, rv = np.zeros(3), np.ones(3)
    out = batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True, 0.1, 1e-5).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)
    m = x.shape[0] * 16
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    rm, rv = np.array([0.5, -1.0]), np.array([4.0, 0.25])
    w, b = np.array([2.0, 1.0]), np.array([0.0, 3.0])
    out = batchnorm2d(Tensor(x), Tensor(w), Tensor(b), rm, rv, False, 0.1, 0.0).data
    expect = (x - rm[None, :, None, None]) / np.sqrt(rv)[None, :, None, None] * w[None, :, None, None] + b[None, :, None, None]
    np.testing.assert_allclose(out, expect)


def test_prelu_forward():
    x = np.array([[-2.0, 3.0]]).reshape(1, 2, 1, 1)
    out = prelu(Tensor(x), Tensor(np.array([0.5, 0.1]))).data
    np.testing.assert_allclose(out.ravel(), [-1.0, 3.0])


def test_linear_shape_check():
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))


def test_global_avg_pool(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, x.mean(axis=(2, 3)))


def test_log_softmax_stable():
    z = np.array([[1000.0, 0.0, -1000.0]])
    out = log_softmax(Tensor(z)).data
    assert np.isfinite(out).all()
    assert out[0, 0] == pytest.approx(0.0)


def test_cross_entropy_value_and_soft_labels(rng):
    z = rng.standard_normal((4, 5))
    y = np.array([0, 3, 1, 4])
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    expect = float(np.mean(lse - shifted[np.arange(4), y]))
    assert softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(expect, rel=1e-12)
    assert softmax_cross_entropy(Tensor(z), one_hot(y, 5, np.float64)).item() == pytest.approx(expect, rel=1e-12)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_no_grad_builds_no_graph(rng):
    a = Tensor(rng.standard_normal(3), requires_grad=True)
    with no_grad():
        b = (a * 2).sum()
    assert b._ctx is None and not b.requires_grad
