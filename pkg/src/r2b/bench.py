"""Timing of the packed binary convolution (numba and numpy kernels) against
the float im2col reference on the same sign tensors."""
from __future__ import annotations

import time
from typing import Callable, Dict, List

import numpy as np

from r2b import _accel, _kernels
from r2b.binconv import pack
from r2b.tensor import Tensor, conv2d_ref, no_grad

# (batch, channels, out_channels, size, kernel, stride)
SHAPES = [
    (1, 64, 64, 56, 3, 1),
    (1, 128, 128, 28, 3, 1),
    (1, 256, 256, 14, 3, 1),
    (1, 512, 512, 7, 3, 1),
    (8, 64, 64, 16, 3, 1),
    (1, 128, 256, 28, 1, 2),
]
QUICK_SHAPES = [(1, 64, 64, 16, 3, 1), (4, 32, 32, 16, 3, 1), (1, 96, 96, 8, 1, 2)]


def _best_ms(fn: Callable[[], object], repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return 1000.0 * best


def run_benchmark(repeats: int = 5, quick: bool = False, seed: int = 0) -> List[Dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for n, c, o, size, k, stride in (QUICK_SHAPES if quick else SHAPES):
        pad = k // 2
        x = np.where(rng.random((n, c, size, size)) < 0.5, -1.0, 1.0).astype(np.float32)
        w = np.where(rng.random((o, c, k, k)) < 0.5, -1.0, 1.0).astype(np.float32)
        px, pw = pack(x), pack(w)
        ho = (size + 2 * pad - k) // stride + 1
        args = (px.words, pw.words, px.valid_mask, c, stride, pad, ho, ho)
        row = {"shape": f"{n}x{c}x{size}x{size} -> {o}, k={k}, s={stride}", "macs": n * o * ho * ho * c * k * k}
        with no_grad():
            ref = conv2d_ref(Tensor(x), Tensor(w), stride, pad).data
            row["float_ms"] = _best_ms(lambda: conv2d_ref(Tensor(x), Tensor(w), stride, pad), repeats)
        row["pack_ms"] = _best_ms(lambda: pack(x), repeats)
        row["numpy_ms"] = _best_ms(lambda: _kernels.binary_conv2d_numpy(*args), repeats)
        if not np.array_equal(_kernels.binary_conv2d_numpy(*args), ref):
            raise AssertionError(f"numpy kernel disagrees with the reference for {row['shape']}")
        if _accel.numba is not None:
            out = _kernels.binary_conv2d_numba(*args)  # compile outside the timed loop
            if not np.array_equal(out, ref):
                raise AssertionError(f"numba kernel disagrees with the reference for {row['shape']}")
            row["numba_ms"] = _best_ms(lambda: _kernels.binary_conv2d_numba(*args), repeats)
        rows.append(row)
    return rows


def format_table(rows: List[Dict]) -> str:
    head = f"{'shape':<34} {'float ms':>9} {'pack ms':>8} {'numpy ms':>9} {'numba ms':>9} {'float/numba':>11}"
    lines = [head, "-" * len(head)]
    for r in rows:
        nb = r.get("numba_ms")
        ratio = f"{r['float_ms'] / nb:10.1f}x" if nb else "n/a"
        nbs = f"{nb:9.2f}" if nb else f"{'n/a':>9}"
        lines.append(f"{r['shape']:<34} {r['float_ms']:9.2f} {r['pack_ms']:8.2f} {r['numpy_ms']:9.2f} {nbs} {ratio:>11}")
    lines.append(f"dispatch backend: {_accel.backend_name()}")
    return "\n".join(lines)
