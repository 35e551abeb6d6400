"""Hot xnor-popcount kernels: numba versions and pure-numpy fallbacks.

Activation words are laid out [N, H, W, nwords] and weight words
[O, k, k, nwords]; bit ``c % 64`` of word ``c // 64`` holds channel ``c``
(1 for +1, 0 for -1). Lanes beyond the channel count are zero and are
excluded through ``mask``.
"""
import numpy as np

from r2b import _accel
from r2b._accel import njit

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_S1, _S2, _S4, _S56 = np.uint64(1), np.uint64(2), np.uint64(4), np.uint64(56)


@njit(inline="always")
def _popcount64(x):
    x = x - ((x >> _S1) & _M1)
    x = (x & _M2) + ((x >> _S2) & _M2)
    x = (x + (x >> _S4)) & _M4
    return (x * _H01) >> _S56


@njit
def dot_numba(a, b, mask):
    acc = 0
    for i in range(a.shape[0]):
        acc += np.int64(_popcount64(~(a[i] ^ b[i]) & mask[i]))
    return acc


def dot_numpy(a, b, mask):
    return int(np.bitwise_count(~(a ^ b) & mask).sum())


@njit
def binary_conv2d_numba(xw, ww, mask, channels, stride, pad, ho, wo):
    n_img, h, w, nw = xw.shape
    n_out, k = ww.shape[0], ww.shape[1]
    span = k * k * nw
    flat = ww.reshape(n_out, span)
    # receptive field gathered into one contiguous run; keep is zero for out-of-bounds taps
    patch = np.zeros(span, dtype=np.uint64)
    keep = np.zeros(span, dtype=np.uint64)
    out = np.empty((n_img, n_out, ho, wo), dtype=np.int32)
    for n in range(n_img):
        for oy in range(ho):
            for ox in range(wo):
                y0 = oy * stride - pad
                x0 = ox * stride - pad
                taps = 0
                for ky in range(k):
                    iy = y0 + ky
                    for kx in range(k):
                        ix = x0 + kx
                        base = (ky * k + kx) * nw
                        if iy < 0 or iy >= h or ix < 0 or ix >= w:
                            for j in range(nw):
                                patch[base + j] = 0
                                keep[base + j] = 0
                        else:
                            taps += 1
                            for j in range(nw):
                                patch[base + j] = xw[n, iy, ix, j]
                                keep[base + j] = mask[j]
                # agreements = taps*C - disagreements, so dot = taps*C - 2*disagreements
                for o in range(n_out):
                    diff = 0
                    for j in range(span):
                        diff += np.int64(_popcount64((patch[j] ^ flat[o, j]) & keep[j]))
                    out[n, o, oy, ox] = taps * channels - 2 * diff
    return out


def binary_conv2d_numpy(xw, ww, mask, channels, stride, pad, ho, wo):
    n_img, h, w, nw = xw.shape
    n_out, k = ww.shape[0], ww.shape[1]
    xp = np.pad(xw, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    inside = np.pad(np.ones((h, w), dtype=np.int64), pad)
    acc = np.zeros((n_img, ho, wo, n_out), dtype=np.int64)
    taps = np.zeros((ho, wo), dtype=np.int64)
    # process images in chunks to bound the (n, ho, wo, o, nw) temporary
    per_img = max(1, ho * wo * n_out * nw)
    chunk = max(1, (1 << 22) // per_img)
    for ky in range(k):
        ys = slice(ky, ky + stride * (ho - 1) + 1, stride)
        for kx in range(k):
            xs = slice(kx, kx + stride * (wo - 1) + 1, stride)
            valid = inside[ys, xs]
            taps += valid
            wk = ww[:, ky, kx, :]
            for s in range(0, n_img, chunk):
                patch = xp[s:s + chunk, ys, xs, :]
                agree = np.bitwise_count(~(patch[:, :, :, None, :] ^ wk[None, None, None]) & mask)
                acc[s:s + chunk] += agree.sum(axis=-1, dtype=np.int64) * valid[None, :, :, None]
    out = 2 * acc - (taps * channels)[None, :, :, None]
    return out.transpose(0, 3, 1, 2).astype(np.int32)


def dot(a, b, mask):
    if _accel.USE_NUMBA:
        return int(dot_numba(a, b, mask))
    return dot_numpy(a, b, mask)


def binary_conv2d(xw, ww, mask, channels, stride, pad, ho, wo, backend=None):
    backend = backend or _accel.backend_name()
    if backend == "numba":
        return binary_conv2d_numba(xw, np.ascontiguousarray(ww), mask, channels, stride, pad, ho, wo)
    if backend == "numpy":
        return binary_conv2d_numpy(xw, ww, mask, channels, stride, pad, ho, wo)
    raise ValueError(f"unknown kernel backend {backend!r}")
