"""Built-in oracle and invariant checks, runnable without the test suite.

``gradient_cases`` is shared with the test suite so both exercise the same
finite-difference probes.
"""
from __future__ import annotations

import math
import time
from collections import OrderedDict
from typing import Callable, Dict, List, Tuple

import numpy as np

from r2b import _accel, _kernels, checkpoint
from r2b.autograd import STE_CLIP, finite_diff_check, sign_ste, tanh_soft_binarize
from r2b.binconv import pack, unpack
from r2b.gating import GatingParams, gate
from r2b.losses import attention_transfer_loss, kd_loss
from r2b.tensor import Tensor, batchnorm2d, conv2d_ref, linear, prelu, softmax_cross_entropy

GRAD_TOLERANCE = 1e-3

# name -> (op, point, kink_distance or None)
GradientCase = Tuple[Callable[..., Tensor], List[np.ndarray], Callable[..., np.ndarray]]


def _bn_case(rng):
    c = 3
    x = rng.standard_normal((4, c, 3, 3))
    w, b = rng.uniform(0.5, 1.5, c), rng.standard_normal(c)

    def op(x, w, b):
        return batchnorm2d(x, w, b, np.zeros(c), np.ones(c), True, 0.1, 1e-5)
    return op, [x, w, b], None


def _prelu_case(rng):
    x = rng.standard_normal((3, 4, 2, 2))
    x += np.sign(x) * 0.05  # stay clear of the kink at 0
    slope = rng.uniform(0.05, 0.5, 4)
    return (lambda x, a: prelu(x, a)), [x, slope], (lambda x, a: np.abs(x))


def _linear_case(rng):
    return (lambda x, w, b: linear(x, w, b)), [rng.standard_normal((5, 6)), rng.standard_normal((3, 6)),
                                               rng.standard_normal(3)], None


def _ce_case(rng):
    labels = rng.integers(0, 5, 4)
    return (lambda z: softmax_cross_entropy(z, labels)), [rng.standard_normal((4, 5)) * 2], None


def _tanh_case(rng):
    return (lambda x: tanh_soft_binarize(x)), [rng.standard_normal((3, 7)) * 1.5], None


def _gate_case(rng):
    c, o, hidden = 8, 6, 2
    point = [rng.standard_normal((3, c, 4, 4)) + 0.3, rng.standard_normal((hidden, c)), rng.standard_normal(hidden),
             rng.uniform(0.1, 0.4, hidden), rng.standard_normal((o, hidden)), rng.standard_normal(o)]

    def op(x, w1, b1, slope, w2, b2):
        return gate(x, GatingParams(w1, b1, slope, w2, b2))

    def kink(x, w1, b1, slope, w2, b2):
        return np.abs(x.mean(axis=(2, 3)) @ w1.T + b1)
    return op, point, kink


def _att_case(rng):
    s1, t1 = rng.uniform(0.1, 2.0, (3, 4, 4)), rng.uniform(0.1, 2.0, (3, 4, 4))
    s2, t2 = rng.uniform(0.1, 2.0, (3, 2, 2)), rng.uniform(0.1, 2.0, (3, 2, 2))
    return (lambda a, b, c, d: attention_transfer_loss([a, c], [b, d])), [s1, t1, s2, t2], None


def _kd_case(rng):
    return (lambda s, t: kd_loss(s, t, 3.0)), [rng.standard_normal((4, 6)) * 2, rng.standard_normal((4, 6)) * 2], None


GRADIENT_BUILDERS: Dict[str, Callable[[np.random.Generator], GradientCase]] = OrderedDict(
    batchnorm=_bn_case, prelu=_prelu_case, linear=_linear_case, softmax_cross_entropy=_ce_case,
    tanh_soft_binarize=_tanh_case, gate=_gate_case, attention_transfer_loss=_att_case, kd_loss=_kd_case)


def gradient_cases(seed: int = 0, points: int = 5):
    """Yield (name, point index, op, point, kink_distance) for every probe."""
    for name, build in GRADIENT_BUILDERS.items():
        for i in range(points):
            op, point, kink = build(np.random.default_rng([seed, i, len(name)]))
            yield name, i, op, point, kink


def max_gradient_error(name: str, seed: int = 0, points: int = 5) -> float:
    worst = 0.0
    for case_name, i, op, point, kink in gradient_cases(seed, points):
        if case_name == name:
            worst = max(worst, finite_diff_check(op, point, kink_distance=kink,
                                                 rng=np.random.default_rng([seed, i])))
    return worst


def ste_matches_clip_rule(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(-3, 3, 200), [-STE_CLIP, STE_CLIP, 0.0]])
    leaf = Tensor(x, requires_grad=True)
    out = sign_ste(leaf)
    upstream = rng.standard_normal(x.shape)
    (out * Tensor(upstream)).sum().backward()
    fwd_ok = np.array_equal(out.data, np.where(x >= 0, 1.0, -1.0))
    bwd_ok = np.array_equal(leaf.grad, upstream * (np.abs(x) <= STE_CLIP))
    return fwd_ok and bwd_ok


def random_conv_case(rng: np.random.Generator):
    n, c = int(rng.integers(1, 5)), int(rng.integers(1, 97))
    o = int(rng.integers(1, 17))
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.choice([1, 2])), int(rng.choice([0, 1]))
    h = int(rng.integers(max(k - 2 * pad, 1), 10))
    w = int(rng.integers(max(k - 2 * pad, 1), 10))
    x = np.where(rng.random((n, c, h, w)) < 0.5, -1.0, 1.0)
    wt = np.where(rng.random((o, c, k, k)) < 0.5, -1.0, 1.0)
    return x, wt, stride, pad


def kernel_mismatches(cases: int, seed: int = 0, backends=None) -> Dict[str, int]:
    backends = backends or (["numba", "numpy"] if _accel.numba is not None else ["numpy"])
    rng = np.random.default_rng(seed)
    bad = {b: 0 for b in backends}
    for _ in range(cases):
        x, wt, stride, pad = random_conv_case(rng)
        ref = conv2d_ref(Tensor(x), Tensor(wt), stride, pad).data
        px, pw = pack(x), pack(wt)
        ho, wo = ref.shape[2:]
        for b in backends:
            out = _kernels.binary_conv2d(px.words, pw.words, px.valid_mask, x.shape[1], stride, pad, ho, wo, backend=b)
            bad[b] += int(not np.array_equal(out, ref))
    return bad


def _loss_identities() -> Dict[str, float]:
    rng = np.random.default_rng(0)
    q = Tensor(rng.uniform(0.1, 1.0, (2, 4, 4)))
    e1 = np.zeros((1, 2, 2)); e1[0, 0, 0] = 1.0
    e2 = np.zeros((1, 2, 2)); e2[0, 1, 1] = 1.0
    t = Tensor(rng.uniform(0.1, 1.0, (2, 4, 4)))
    z = Tensor(rng.standard_normal((3, 5)))
    return {
        "identical maps": float(attention_transfer_loss([q], [q]).item()),
        "orthonormal maps - sqrt2": float(attention_transfer_loss([Tensor(e1)], [Tensor(e2)]).item()) - math.sqrt(2),
        "rescaled side": float(attention_transfer_loss([q], [t]).item()
                               - attention_transfer_loss([q * 7.5], [t]).item()),
        "kd identical logits": float(kd_loss(z, z, 3.0).item()),
    }


def _checkpoint_roundtrip() -> bool:
    rng = np.random.default_rng(0)
    entries = OrderedDict(a=rng.standard_normal((3, 4)).astype(np.float32), b=np.arange(5, dtype=np.float32))
    raw = checkpoint.dumps(checkpoint.Checkpoint(entries, "FULL_BIN", "{}"))
    return checkpoint.dumps(checkpoint.loads(raw)) == raw


def _cost_table() -> Dict[str, float]:
    from r2b.cost import REFERENCE_COUNTS, count_architecture

    worst = {}
    for name, (bops, flops) in REFERENCE_COUNTS.items():
        c = count_architecture(name)
        err_b = 0.0 if bops == 0 and c.bops == 0 else abs(c.bops - bops) / bops if bops else float("inf")
        worst[name] = max(err_b, abs(c.flops - flops) / flops)
    return worst


def run_all(seed: int = 0) -> Tuple[bool, List[str]]:
    lines: List[str] = []
    ok = True

    def record(name: str, passed: bool, detail: str) -> None:
        nonlocal ok
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name:<40} {detail}")

    t = time.perf_counter()
    bad = kernel_mismatches(200, seed)
    record("kernel equivalence (200 cases)", not any(bad.values()),
           f"mismatches {bad}, {time.perf_counter() - t:.1f}s")

    x = np.where(np.random.default_rng(seed).random((2, 70, 3, 3)) < 0.5, -1.0, 1.0)
    record("pack/unpack round trip", np.array_equal(unpack(pack(x)).data, x), "70 channels over 2 words")

    for name in GRADIENT_BUILDERS:
        err = max_gradient_error(name, seed)
        record(f"gradient: {name}", err < GRAD_TOLERANCE, f"max rel err {err:.2e}")
    record("straight-through clip rule", ste_matches_clip_rule(seed), "exact")

    for name, value in _loss_identities().items():
        record(f"loss identity: {name}", abs(value) < 1e-6, f"{value:+.2e}")

    record("checkpoint byte round trip", _checkpoint_roundtrip(), "save -> load -> save")

    for name, err in _cost_table().items():
        record(f"op count: {name}", err <= 0.02, f"worst cell {100 * err:.2f}%")
    return ok, lines
