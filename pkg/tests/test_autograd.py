import numpy as np
import pytest

from r2b.autograd import (STE_CLIP, Graph, NonSmoothPointError, finite_diff_check, sign_ste,
                          tanh_soft_binarize)
from r2b.tensor import Tensor, prelu


def test_second_backward_doubles_leaf_grads(rng):
    a = Tensor(rng.standard_normal(4), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    loss = (a * b + a.exp()).sum()
    loss.backward()
    first = a.grad.copy(), b.grad.copy()
    loss.backward()
    np.testing.assert_allclose(a.grad, 2 * first[0])
    np.testing.assert_allclose(b.grad, 2 * first[1])


def test_intermediates_hold_no_grad(rng):
    a = Tensor(rng.standard_normal(3), requires_grad=True)
    mid = a * 3
    (mid * mid).sum().backward()
    assert mid.grad is None
    np.testing.assert_allclose(a.grad, 18 * a.data)


def test_shared_subexpression_accumulates():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = a * a
    (b + b).sum().backward()
    np.testing.assert_allclose(a.grad, [8.0])


def test_graph_topological_order():
    a = Tensor(np.ones(2), requires_grad=True)
    b = a * 2
    c = b + a
    d = c.sum()
    order = Graph(d).nodes
    pos = {id(t): i for i, t in enumerate(order)}
    assert pos[id(a)] < pos[id(b)] < pos[id(c)] < pos[id(d)]


def test_deep_chain_does_not_recurse():
    a = Tensor(np.ones(1), requires_grad=True)
    x = a
    for _ in range(5000):
        x = x + 1.0
    x.sum().backward()
    assert a.grad[0] == 1.0


def test_non_scalar_backward_rejected():
    with pytest.raises(ValueError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_sign_forward_maps_zero_to_plus_one():
    out = sign_ste(Tensor(np.array([-0.5, 0.0, 2.0]))).data
    np.testing.assert_array_equal(out, [-1.0, 1.0, 1.0])


def test_ste_gradient_is_clipped_identity():
    x = np.array([-2.0, -STE_CLIP, -0.3, 0.0, 0.7, STE_CLIP, 1.5])
    leaf = Tensor(x, requires_grad=True)
    sign_ste(leaf).sum().backward()
    np.testing.assert_array_equal(leaf.grad, [0, 1, 1, 1, 1, 1, 0])


def test_tanh_soft_binarize():
    x = np.linspace(-3, 3, 7)
    leaf = Tensor(x, requires_grad=True)
    out = tanh_soft_binarize(leaf)
    np.testing.assert_allclose(out.data, np.tanh(x))
    out.sum().backward()
    np.testing.assert_allclose(leaf.grad, 1 - np.tanh(x) ** 2)


def test_finite_diff_check_accepts_correct_gradient(rng):
    err = finite_diff_check(lambda a, b: (a * b).exp(), [rng.standard_normal(5) * 0.5, rng.standard_normal(5)])
    assert err < 1e-6


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda a: a, [np.ones(2)], step=0.0)


def test_finite_diff_check_refuses_kink():
    x = np.array([1e-8, 1.0])
    with pytest.raises(NonSmoothPointError):
        finite_diff_check(lambda a, s: prelu(a.reshape(1, 2, 1, 1), s), [x, np.array([0.25])],
                          kink_distance=lambda a, s: np.abs(a))
