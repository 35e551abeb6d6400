import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import log_softmax as sp_log_softmax, softmax as sp_softmax

from r2b.losses import (LossConfig, attention_map, attention_transfer_loss, combined_loss, compute_losses,
                        kd_loss)
from r2b.tensor import Tensor


def att_oracle(s_maps, t_maps):
    total = 0.0
    for s, t in zip(s_maps, t_maps):
        s = s.reshape(len(s), -1)
        t = t.reshape(len(t), -1)
        s = s / (np.linalg.norm(s, axis=1, keepdims=True) + 1e-8)
        t = t / (np.linalg.norm(t, axis=1, keepdims=True) + 1e-8)
        total += np.linalg.norm(s - t, axis=1).mean()
    return total


def test_attention_map_sums_squares_over_channels(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(attention_map(Tensor(a)).data, (a ** 2).sum(axis=1))


def test_attention_loss_matches_oracle(rng):
    s = [rng.uniform(0, 1, (3, 4, 4)), rng.uniform(0, 1, (3, 2, 2))]
    t = [rng.uniform(0, 1, (3, 4, 4)), rng.uniform(0, 1, (3, 2, 2))]
    got = attention_transfer_loss([Tensor(x) for x in s], [Tensor(x) for x in t]).item()
    assert got == pytest.approx(att_oracle(s, t), rel=1e-12)


def test_attention_loss_identities():
    q = Tensor(np.random.default_rng(0).uniform(0.1, 1, (2, 3, 3)))
    assert attention_transfer_loss([q], [q]).item() == 0.0
    e1, e2 = np.zeros((1, 4)), np.zeros((1, 4))
    e1[0, 0], e2[0, 2] = 1.0, 1.0
    assert attention_transfer_loss([Tensor(e1)], [Tensor(e2)]).item() == pytest.approx(math.sqrt(2), abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 1e4), st.integers(0, 2**31 - 1))
def test_attention_loss_scale_invariant(scale, seed):
    # exact up to the 1e-8 normalizer guard, whose effect grows as the map norm shrinks
    r = np.random.default_rng(seed)
    s, t = r.uniform(0.01, 1, (2, 3, 3)), r.uniform(0.01, 1, (2, 3, 3))
    base = attention_transfer_loss([Tensor(s)], [Tensor(t)]).item()
    scaled = attention_transfer_loss([Tensor(s * scale)], [Tensor(t)]).item()
    assert abs(base - scaled) < 1e-6


def test_attention_loss_zero_map_has_finite_gradient():
    s = Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    t = Tensor(np.ones((1, 2, 2)))
    attention_transfer_loss([s], [t]).backward()
    assert np.isfinite(s.grad).all()


def test_attention_loss_shape_errors():
    with pytest.raises(ValueError):
        attention_transfer_loss([Tensor(np.ones((1, 2, 2)))], [Tensor(np.ones((1, 3, 3)))])
    with pytest.raises(ValueError):
        attention_transfer_loss([], [])


def test_kd_matches_scipy_oracle(rng):
    s, t, tau = rng.standard_normal((4, 6)), rng.standard_normal((4, 6)), 3.0
    pt = sp_softmax(t / tau, axis=1)
    expect = tau ** 2 * (pt * (np.log(pt) - sp_log_softmax(s / tau, axis=1))).sum(axis=1).mean()
    assert kd_loss(Tensor(s), Tensor(t), tau).item() == pytest.approx(expect, rel=1e-10)


def test_kd_zero_on_identical_logits(rng):
    z = Tensor(rng.standard_normal((3, 5)))
    assert abs(kd_loss(z, z, 4.0).item()) < 1e-12


def test_combined_loss_skips_zero_weights():
    cfg = LossConfig(ce_weight=1.0, att_weight=0.0, kd_weight=2.0)
    nan = Tensor(np.array(np.nan))
    out = combined_loss(Tensor(np.array(1.5)), nan, Tensor(np.array(0.25)), cfg)
    assert out.item() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        combined_loss(None, None, None, LossConfig(1, 0, 0))


def test_loss_config_defaults_and_validation():
    cfg = LossConfig.default_for(4)
    assert cfg.att_weight == pytest.approx(2.5) and cfg.temperature == 3.0
    with pytest.raises(ValueError):
        LossConfig(ce_weight=-1)
    with pytest.raises(ValueError):
        LossConfig(temperature=0)


def test_compute_losses_selects_points(rng):
    s = [Tensor(rng.standard_normal((2, 3, 4, 4))) for _ in range(3)]
    t = [Tensor(rng.standard_normal((2, 3, 4, 4))) for _ in range(3)]
    logits, labels = Tensor(rng.standard_normal((2, 4))), np.array([0, 1])
    cfg = LossConfig(ce_weight=0.0, att_weight=1.0, kd_weight=0.0, points=[2])
    parts = compute_losses(logits, s, labels, cfg, None, t)
    expect = att_oracle([(s[2].data ** 2).sum(1)], [(t[2].data ** 2).sum(1)])
    assert parts["att"].item() == pytest.approx(expect, rel=1e-5)
    assert set(parts) == {"att", "total"}
