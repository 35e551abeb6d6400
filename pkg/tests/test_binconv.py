import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from r2b import _accel
from r2b.binconv import (ScaleFactors, analytic_alpha, binary_conv2d, pack, scale_output, unpack,
                         xnor_popcount_dot)
from r2b.tensor import ShapeError, Tensor
from conftest import naive_conv2d

BACKENDS = ["numpy"] + (["numba"] if _accel.numba is not None else [])


def signs(r, shape):
    return np.where(r.random(shape) < 0.5, -1.0, 1.0)


def test_xnor_popcount_dot_worked_example():
    # a = 10110010, b = 10011010 (LSB = lane 0): 6 of 8 lanes agree -> 6 - 2 = 4
    assert xnor_popcount_dot(np.uint64(0b10110010), np.uint64(0b10011010), 8) == 4


def test_xnor_popcount_dot_ignores_lanes_past_count():
    a, b = np.uint64(0b1111_0000_0101), np.uint64(0b0000_0000_0101)
    assert xnor_popcount_dot(a, b, 4) == 4


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**31 - 1))
def test_dot_matches_float_dot(n, seed):
    r = np.random.default_rng(seed)
    a, b = signs(r, n), signs(r, n)
    pa = pack(a.reshape(1, n, 1, 1)).words.ravel()
    pb = pack(b.reshape(1, n, 1, 1)).words.ravel()
    assert xnor_popcount_dot(pa, pb, n) == int(a @ b)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 150), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_pack_unpack_round_trip(n, c, h, w, seed):
    x = signs(np.random.default_rng(seed), (n, c, h, w))
    bt = pack(x)
    assert bt.words.shape == (n, h, w, -(-c // 64))
    np.testing.assert_array_equal(unpack(bt).data, x)


def test_pack_bit_layout():
    x = -np.ones((1, 70, 1, 1))
    x[0, [0, 3, 64, 69]] = 1
    bt = pack(x)
    assert int(bt.words[0, 0, 0, 0]) == 0b1001
    assert int(bt.words[0, 0, 0, 1]) == (1 | 1 << 5)
    assert int(bt.valid_mask[1]) == (1 << 6) - 1


@pytest.mark.parametrize("bad", [np.array([[[[0.0]]]]), np.array([[[[0.5, 1.0]]]])])
def test_pack_rejects_non_signs(bad):
    with pytest.raises(ValueError):
        pack(bad)


def test_pack_rejects_wrong_rank():
    with pytest.raises(ShapeError):
        pack(np.ones((2, 3)))


@pytest.mark.parametrize("backend", BACKENDS)
@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 96), st.integers(1, 6), st.sampled_from([1, 3]), st.sampled_from([1, 2]),
       st.integers(0, 1), st.integers(3, 8), st.integers(0, 2**31 - 1))
def test_binary_conv_equals_direct_convolution(backend, n, c, o, k, stride, pad, size, seed):
    r = np.random.default_rng(seed)
    x, w = signs(r, (n, c, size, size)), signs(r, (o, c, k, k))
    out = binary_conv2d(pack(x), pack(w), stride, pad, backend=backend).data
    np.testing.assert_array_equal(out, naive_conv2d(x, w, stride, pad))


def test_binary_conv_shape_mismatch():
    with pytest.raises(ShapeError):
        binary_conv2d(pack(np.ones((1, 3, 4, 4))), pack(np.ones((2, 4, 3, 3))), 1, 1)


def test_numpy_fallback_selected_by_env():
    code = "from r2b._accel import backend_name; print(backend_name())"
    env = dict(os.environ, R2B_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_scale_output_per_channel(rng):
    y = rng.standard_normal((2, 3, 2, 2))
    gamma = np.array([0.5, 2.0, -1.0])
    np.testing.assert_allclose(scale_output(Tensor(y), gamma).data, y * gamma[None, :, None, None])
    np.testing.assert_allclose(scale_output(Tensor(y), ScaleFactors(gamma)).data, y * gamma[None, :, None, None])
    with pytest.raises(ShapeError):
        scale_output(Tensor(y), np.ones(4))


def test_analytic_alpha_is_mean_abs(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    np.testing.assert_allclose(analytic_alpha(w).data, np.abs(w).reshape(4, -1).mean(axis=1), rtol=1e-6)
