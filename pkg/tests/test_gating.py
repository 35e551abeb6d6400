import numpy as np
import pytest

from r2b.gating import Gate, bottleneck_width, gate, rescale
from r2b.tensor import ShapeError, Tensor


@pytest.mark.parametrize("c,r,expect", [(64, 8, 8), (3, 8, 1), (100, 8, 13), (512, 8, 64)])
def test_bottleneck_width(c, r, expect):
    assert bottleneck_width(c, r) == expect


def test_gate_matches_numpy_oracle(rng):
    g = Gate(16, 12, 8, rng)
    for p in (g.b1, g.b2):
        p.data[:] = rng.standard_normal(p.shape)
    x = rng.standard_normal((3, 16, 5, 5)).astype(np.float32)
    s = x.mean(axis=(2, 3))
    h = s @ g.w1.data.T + g.b1.data
    h = np.where(h >= 0, h, g.slope.data * h)
    expect = 1 / (1 + np.exp(-(h @ g.w2.data.T + g.b2.data)))
    out = g(Tensor(x)).data
    assert out.shape == (3, 12)
    np.testing.assert_allclose(out, expect, rtol=1e-5)
    assert ((out > 0) & (out < 1)).all()


def test_gate_depends_only_on_channel_means(rng):
    g = Gate(4, 4, 2, rng)
    x = rng.standard_normal((1, 4, 6, 6))
    y = x[:, :, ::-1, :].copy()
    np.testing.assert_allclose(g(Tensor(x)).data, g(Tensor(y)).data, rtol=1e-6)


def test_gate_rejects_channel_mismatch(rng):
    g = Gate(4, 4, 2, rng)
    with pytest.raises(ShapeError):
        gate(Tensor(np.zeros((1, 5, 2, 2))), g.params)


def test_rescale(rng):
    y = rng.standard_normal((2, 3, 2, 2))
    gamma, gv = rng.uniform(0.5, 2, 3), rng.uniform(0, 1, (2, 3))
    out = rescale(Tensor(y), gamma, Tensor(gv)).data
    np.testing.assert_allclose(out, y * (gamma[None] * gv)[:, :, None, None], rtol=1e-6)
    with pytest.raises(ShapeError):
        rescale(Tensor(y), gamma, Tensor(gv[:1]))


def test_zero_parameters_give_one_half(rng):
    g = Gate(8, 8, 4, rng)
    for p in g.parameters():
        p.data[:] = 0
    np.testing.assert_array_equal(g(Tensor(rng.standard_normal((2, 8, 3, 3)))).data, 0.5)


def test_saturated_bias(rng):
    g = Gate(8, 8, 4, rng)
    g.w2.data[:] = 0
    g.b2.data[:] = 10
    assert (g(Tensor(rng.standard_normal((2, 8, 3, 3)))).data > 0.9999).all()


def test_gate_maps_between_channel_counts(rng):
    # a strided block's first unit widens C -> O; the gate follows the output width
    assert Gate(8, 16, 8, rng)(Tensor(rng.standard_normal((2, 8, 4, 4)))).shape == (2, 16)
