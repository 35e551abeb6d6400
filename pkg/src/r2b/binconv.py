"""Bit-packed binary convolution and output scaling factors.

Signs are packed along the channel axis into 64-bit words so that each
(tap, output-channel) dot product costs one xnor + popcount per word.
Spatial zero padding is handled by skipping out-of-bounds taps entirely,
which keeps ``binary_conv2d`` integer-identical to :func:`r2b.tensor.conv2d_ref`
on the unpacked ±1 tensors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from r2b import _kernels
from r2b.tensor import ShapeError, Tensor, as_tensor, conv_output_size

WORD_BITS = 64


def _lane_mask(channels: int) -> np.ndarray:
    nwords = max(1, -(-channels // WORD_BITS))
    mask = np.zeros(nwords, dtype=np.uint64)
    full, rest = divmod(channels, WORD_BITS)
    mask[:full] = np.uint64(0xFFFFFFFFFFFFFFFF)
    if rest:
        mask[full] = np.uint64((1 << rest) - 1)
    return mask


@dataclass
class BitTensor:
    """Packed sign tensor.

    ``shape`` is the logical [N, C, H, W] (or [O, C, k, k]) extent; ``words``
    is [N, H, W, nwords] uint64 with channels as the lane axis.
    """

    shape: Tuple[int, int, int, int]
    words: np.ndarray
    valid_mask: np.ndarray

    @property
    def channels(self) -> int:
        return self.shape[1]

    @property
    def valid_count(self) -> int:
        return self.shape[1]

    def unpack(self) -> Tensor:
        return unpack(self)


def pack(sign_tensor) -> BitTensor:
    """Pack a tensor whose elements are all exactly +1 or -1."""
    arr = sign_tensor.data if isinstance(sign_tensor, Tensor) else np.asarray(sign_tensor)
    if arr.ndim != 4:
        raise ShapeError(f"pack expects a 4-D tensor, got shape {arr.shape}")
    if not np.all((arr == 1) | (arr == -1)):
        raise ValueError("pack: tensor contains values other than +1/-1")
    n, c, h, w = arr.shape
    mask = _lane_mask(c)
    nwords = mask.shape[0]
    bits = np.zeros((n, h, w, nwords * WORD_BITS), dtype=np.uint8)
    bits[..., :c] = (arr > 0).transpose(0, 2, 3, 1)
    packed = np.packbits(bits.reshape(n, h, w, nwords, WORD_BITS), axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").reshape(n, h, w, nwords).astype(np.uint64)
    return BitTensor((n, c, h, w), words, mask)


def unpack(bt: BitTensor) -> Tensor:
    n, c, h, w = bt.shape
    raw = np.ascontiguousarray(bt.words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(raw.reshape(n, h, w, -1), axis=-1, bitorder="little")[..., :c]
    return Tensor(np.where(bits.transpose(0, 3, 1, 2) > 0, 1.0, -1.0).astype(np.float32))


def xnor_popcount_dot(a: np.ndarray, b: np.ndarray, valid_count: int) -> int:
    """±1 dot product of two packed vectors over their first ``valid_count`` lanes."""
    a = np.atleast_1d(np.asarray(a, dtype=np.uint64))
    b = np.atleast_1d(np.asarray(b, dtype=np.uint64))
    if a.shape != b.shape:
        raise ShapeError(f"word arrays differ in shape: {a.shape} vs {b.shape}")
    mask = _lane_mask(valid_count)
    if mask.shape[0] < a.shape[0]:
        mask = np.concatenate([mask, np.zeros(a.shape[0] - mask.shape[0], dtype=np.uint64)])
    agree = _kernels.dot(a, b, mask[: a.shape[0]])
    return 2 * agree - valid_count


def binary_conv2d(input: BitTensor, weight: BitTensor, stride: int = 1, pad: int = 0,
                  backend: Optional[str] = None) -> Tensor:
    """Integer-valued convolution of packed signs; padded taps contribute 0."""
    n, c, h, w = input.shape
    o, cw, k, k2 = weight.shape
    if c != cw or k != k2:
        raise ShapeError(f"binary_conv2d: input {input.shape} incompatible with weight {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} larger than padded input {(h, w)}")
    out = _kernels.binary_conv2d(input.words, weight.words, input.valid_mask, c, stride, pad, ho, wo,
                                 backend=backend)
    return Tensor(out.astype(np.float32))


@dataclass
class ScaleFactors:
    """Per-output-channel multipliers: learned ``gamma`` and optional analytic alpha."""

    gamma: np.ndarray
    alpha_analytic: Optional[np.ndarray] = None

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma)
        if self.alpha_analytic is not None and len(self.alpha_analytic) != len(self.gamma):
            raise ShapeError("alpha and gamma lengths differ")

    def __len__(self) -> int:
        return len(self.gamma)


def _channel_view(v: Tensor, ndim: int) -> Tensor:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def scale_output(conv_out: Tensor, gamma) -> Tensor:
    """Multiply output channel ``o`` by ``gamma[o]`` (differentiable in both)."""
    if isinstance(gamma, ScaleFactors):
        gamma = gamma.gamma
    gamma = as_tensor(gamma, dtype=conv_out.dtype)
    if gamma.ndim != 1 or gamma.shape[0] != conv_out.shape[1]:
        raise ShapeError(f"gamma length {gamma.shape} does not match {conv_out.shape[1]} output channels")
    return conv_out * _channel_view(gamma, conv_out.ndim)


def analytic_alpha(weight) -> Tensor:
    """Per-output-channel mean absolute weight."""
    weight = as_tensor(weight)
    o = weight.shape[0]
    return weight.abs().reshape(o, -1).mean(axis=1)
