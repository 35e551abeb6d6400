"""Data-driven channel re-scaling.

A squeeze-style gate reads the real-valued activations that enter a binary
convolution (before the sign) and predicts one multiplier in (0, 1) per
output channel and per sample. The multipliers are applied to the integer
output of the binary convolution together with the learned scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from r2b.nn import Module, Parameter
from r2b.tensor import ShapeError, Tensor, global_avg_pool, linear, prelu

DEFAULT_RATIO = 8


@dataclass
class GatingParams:
    """Raw parameter arrays of a gate (used by the functional form)."""

    w1: Tensor
    b1: Tensor
    slope: Tensor
    w2: Tensor
    b2: Tensor
    ratio: int = DEFAULT_RATIO

    @property
    def in_channels(self) -> int:
        return self.w1.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w2.shape[0]


def bottleneck_width(channels: int, ratio: int) -> int:
    return max(1, -(-channels // ratio))


def gate(pre_bin_activations: Tensor, params: GatingParams) -> Tensor:
    """sigmoid(W2 · prelu(W1 · avgpool(x) + b1) + b2), shape [N, O]."""
    if pre_bin_activations.shape[1] != params.in_channels:
        raise ShapeError(f"gate expects {params.in_channels} channels, got {pre_bin_activations.shape[1]}")
    squeezed = global_avg_pool(pre_bin_activations)
    hidden = prelu(linear(squeezed, params.w1, params.b1), params.slope)
    return linear(hidden, params.w2, params.b2).sigmoid()


def rescale(conv_out: Tensor, gamma, g: Tensor) -> Tensor:
    """conv_out[n, o] * gamma[o] * g[n, o]."""
    n, o = conv_out.shape[:2]
    gamma = gamma if isinstance(gamma, Tensor) else Tensor(np.asarray(gamma, dtype=conv_out.dtype))
    if gamma.shape != (o,) or g.shape != (n, o):
        raise ShapeError(f"rescale: conv output {conv_out.shape} vs gamma {gamma.shape} / gate {g.shape}")
    factor = g * gamma.reshape(1, o)
    return conv_out * factor.reshape(n, o, 1, 1)


class Gate(Module):
    def __init__(self, cin: int, cout: int, ratio: int = DEFAULT_RATIO, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        hidden = bottleneck_width(cin, ratio)
        self.cin, self.cout, self.ratio, self.hidden = cin, cout, ratio, hidden
        b1, b2 = 1.0 / np.sqrt(cin), 1.0 / np.sqrt(hidden)
        self.w1 = Parameter(rng.uniform(-b1, b1, (hidden, cin)).astype(np.float32), decay=True)
        self.b1 = Parameter(np.zeros(hidden, dtype=np.float32))
        self.slope = Parameter(np.full(hidden, 0.25, dtype=np.float32))
        self.w2 = Parameter(rng.uniform(-b2, b2, (cout, hidden)).astype(np.float32), decay=True)
        self.b2 = Parameter(np.zeros(cout, dtype=np.float32))

    @property
    def params(self) -> GatingParams:
        return GatingParams(self.w1, self.b1, self.slope, self.w2, self.b2, self.ratio)

    def forward(self, x: Tensor) -> Tensor:
        return gate(x, self.params)
