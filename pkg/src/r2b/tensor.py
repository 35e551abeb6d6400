"""Dense float tensor and the reference (non-binary) neural primitives.

Every differentiable operation is a :class:`Function` subclass with a numpy
``forward`` and a ``backward`` that maps the upstream gradient to one gradient
per tensor input. Reverse-mode traversal lives in :mod:`r2b.autograd`.
"""
from __future__ import annotations

import contextlib
from typing import Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_float_array(data: ArrayLike, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    ``data`` is a row-major numpy array (float32 by default, float64 when
    constructed from float64 data). ``grad`` is populated by
    :func:`r2b.autograd.backward` for leaf tensors with ``requires_grad``.
    """

    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 _ctx: Optional["Function"] = None, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_float_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._ctx = _ctx
        self.name = name

    # -- metadata -------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd entry -------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        from r2b.autograd import backward

        backward(self, grad)

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, _lift(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_lift(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Pow.apply(self, exponent=0.5)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def relu(self) -> "Tensor":
        return ReLU.apply(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class Function:
    """One node of the computation graph.

    ``apply`` runs ``forward`` on raw arrays and, when any input requires a
    gradient (and recording is on), links the output to this node.
    """

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:  # pragma: no cover
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        ctx = cls(*tensors)
        out = ctx.forward(*(t.data for t in tensors), **kwargs)
        needs = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=needs, _ctx=ctx if needs else None)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# elementwise and reduction ops
# ----------------------------------------------------------------------
class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return unbroadcast(g * self.b, self.a.shape), unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = unbroadcast(g / self.b, self.a.shape)
        gb = unbroadcast(-g * self.a / (self.b * self.b), self.b.shape)
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Pow(Function):
    def forward(self, a, exponent):
        self.a, self.p = a, exponent
        return a ** exponent

    def backward(self, g):
        return (g * self.p * self.a ** (self.p - 1.0),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Abs(Function):
    def forward(self, a):
        self.a = a
        return np.abs(a)

    def backward(self, g):
        return (g * np.sign(self.a),)


class Sigmoid(Function):
    def forward(self, a):
        # split by sign to avoid overflow in exp
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        self.out = out
        return out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return a * self.mask

    def backward(self, g):
        return (g * self.mask,)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class RowNorm(Function):
    """Euclidean norm of each row of a 2-D input; gradient 0 at a zero row."""

    def forward(self, a):
        self.a = a
        self.out = np.sqrt((a * a).sum(axis=1))
        return self.out

    def backward(self, g):
        safe = np.where(self.out > 0, self.out, 1.0)
        scale = np.where(self.out > 0, g / safe, 0.0)
        return (self.a * scale[:, None],)


def row_norm(x: Tensor) -> Tensor:
    return RowNorm.apply(x)


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------
def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    """Unfold ``x`` [N,C,H,W] to columns [N*Ho*Wo, C*k*k] (zero padding)."""
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, ho, wo, c, k, k), dtype=x.dtype)
    for ky in range(k):
        ys = slice(ky, ky + stride * (ho - 1) + 1, stride)
        for kx in range(k):
            xs = slice(kx, kx + stride * (wo - 1) + 1, stride)
            cols[:, :, :, :, ky, kx] = x[:, :, ys, xs].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * k * k), ho, wo


def col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to an image."""
    n, c, h, w = x_shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ky in range(k):
        ys = slice(ky, ky + stride * (ho - 1) + 1, stride)
        for kx in range(k):
            xs = slice(kx, kx + stride * (wo - 1) + 1, stride)
            out[:, :, ys, xs] += cols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


class Conv2d(Function):
    def forward(self, x, w, stride=1, pad=0):
        o, c, k, k2 = w.shape
        if x.ndim != 4 or k != k2:
            raise ShapeError(f"conv2d expects input [N,C,H,W] and square weight, got {x.shape}, {w.shape}")
        if x.shape[1] != c:
            raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {c}")
        if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
            raise ShapeError(f"kernel {k} larger than padded input {x.shape[2:]} (pad={pad})")
        self.x_shape, self.w, self.stride, self.pad = x.shape, w, stride, pad
        cols, ho, wo = im2col(x, k, stride, pad)
        self.cols = cols
        out = cols @ w.reshape(o, -1).T
        return out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2)

    def backward(self, g):
        o, c, k, _ = self.w.shape
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ self.cols).reshape(self.w.shape)
        gcols = g2 @ self.w.reshape(o, -1)
        gx = col2im(gcols, self.x_shape, k, self.stride, self.pad)
        return gx, gw


def conv2d_ref(input: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Real-valued cross-correlation with zero padding, via im2col + GEMM."""
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    return Conv2d.apply(as_tensor(input), as_tensor(weight), stride=stride, pad=pad)


class MaxPool2d(Function):
    def forward(self, x, k=3, stride=2, pad=1):
        n, c, h, w = x.shape
        self.x_shape, self.k, self.stride, self.pad = x.shape, k, stride, pad
        ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
        windows = np.empty((k * k, n, c, ho, wo), dtype=x.dtype)
        for ky in range(k):
            for kx in range(k):
                windows[ky * k + kx] = xp[:, :, ky:ky + stride * (ho - 1) + 1:stride,
                                          kx:kx + stride * (wo - 1) + 1:stride]
        self.arg = windows.argmax(axis=0)
        return windows.max(axis=0)

    def backward(self, g):
        n, c, h, w = self.x_shape
        k, s, p = self.k, self.stride, self.pad
        ho, wo = g.shape[2:]
        out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
        for ky in range(k):
            for kx in range(k):
                sel = self.arg == ky * k + kx
                out[:, :, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s] += g * sel
        return (out[:, :, p:p + h, p:p + w],)


def max_pool2d(x: Tensor, k: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    return MaxPool2d.apply(x, k=k, stride=stride, pad=pad)


# ----------------------------------------------------------------------
# normalization, activations, pooling, dense
# ----------------------------------------------------------------------
class BatchNormTrain(Function):
    def forward(self, x, gamma, beta, eps=BN_EPS):
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        self.axes = axes
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        self.invstd = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.invstd
        self.gamma_b = gamma.reshape(mean.shape)
        self.batch_mean = mean.reshape(-1)
        self.batch_var = var.reshape(-1)
        self.count = x.size // x.shape[1]
        return self.xhat * self.gamma_b + beta.reshape(mean.shape)

    def backward(self, g):
        axes = self.axes
        ggamma = (g * self.xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * self.gamma_b
        m = self.count
        gx = (self.invstd / m) * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                  - self.xhat * (dxhat * self.xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta


class ChannelAffine(Function):
    """y = x * scale[c] + shift[c] with constant (x-independent) per-channel statistics folded in."""

    def forward(self, x, gamma, beta, mean=None, invstd=None):
        shape = (1, -1) + (1,) * (x.ndim - 2)
        self.axes = (0, 2, 3) if x.ndim == 4 else (0,)
        self.xhat = (x - mean.reshape(shape)) * invstd.reshape(shape)
        self.scale = (gamma.reshape(shape)) * invstd.reshape(shape)
        return self.xhat * gamma.reshape(shape) + beta.reshape(shape)

    def backward(self, g):
        return g * self.scale, (g * self.xhat).sum(axis=self.axes), g.sum(axis=self.axes)


def batchnorm2d(input: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
                eps: float = BN_EPS) -> Tensor:
    """Batch normalization over channel axis 1.

    In training mode batch statistics normalize the input and the running
    buffers are updated in place with ``momentum`` (unbiased variance, as is
    conventional). In eval mode the running statistics are used.
    """
    c = input.shape[1]
    if weight.shape != (c,) or bias.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batchnorm parameters must have length {c}, got {weight.shape}/{bias.shape}")
    if training:
        fn = BatchNormTrain(input, weight, bias)
        data = fn.forward(input.data, weight.data, bias.data, eps=eps)
        needs = _grad_enabled and (input.requires_grad or weight.requires_grad or bias.requires_grad)
        out = Tensor(data, requires_grad=needs, _ctx=fn if needs else None)
        bm, bv, m = fn.batch_mean, fn.batch_var, fn.count
        unbiased = bv * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * bm.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
        return out
    invstd = (1.0 / np.sqrt(running_var + eps)).astype(input.dtype)
    return ChannelAffine.apply(input, weight, bias, mean=running_mean.astype(input.dtype), invstd=invstd)


class PReLU(Function):
    def forward(self, x, slope):
        shape = (1, -1) + (1,) * (x.ndim - 2) if slope.size > 1 else (1,) * x.ndim
        self.neg = x < 0
        self.x = x
        self.slope_b = slope.reshape(shape)
        self.slope_shape = slope.shape
        return np.where(self.neg, x * self.slope_b, x)

    def backward(self, g):
        gx = np.where(self.neg, g * self.slope_b, g)
        gs = g * self.x * self.neg
        if len(self.slope_shape) and self.slope_shape[0] > 1:
            axes = tuple(a for a in range(g.ndim) if a != 1)
            gs = gs.sum(axis=axes)
        else:
            gs = np.asarray(gs.sum()).reshape(self.slope_shape)
        return gx, gs


def prelu(input: Tensor, slope: Tensor) -> Tensor:
    slope = as_tensor(slope, dtype=input.dtype)
    if slope.size not in (1, input.shape[1] if input.ndim > 1 else 1):
        raise ShapeError(f"prelu slope length {slope.size} does not match {input.shape[1]} channels")
    return PReLU.apply(input, slope)


def global_avg_pool(input: Tensor) -> Tensor:
    """Mean over the spatial axes: [N,C,H,W] -> [N,C]."""
    if input.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {input.shape}")
    return input.mean(axis=(2, 3))


class Linear(Function):
    def forward(self, x, w, b):
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, g):
        return g @ self.w, g.T @ self.x, g.sum(axis=0)


def linear(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x`` [N,D], ``W`` [E,D], ``b`` [E]."""
    if input.ndim != 2 or weight.ndim != 2 or input.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {input.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} must have length {weight.shape[0]}")
    return Linear.apply(input, weight, bias)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class LogSoftmax(Function):
    def forward(self, z):
        self.out = _log_softmax(z)
        return self.out

    def backward(self, g):
        return (g - np.exp(self.out) * g.sum(axis=1, keepdims=True),)


def log_softmax(logits: Tensor) -> Tensor:
    return LogSoftmax.apply(logits)


class SoftmaxCrossEntropy(Function):
    def forward(self, z, target=None):
        self.logp = _log_softmax(z)
        self.target = target
        return np.asarray(-(target * self.logp).sum() / z.shape[0], dtype=z.dtype)

    def backward(self, g):
        n = self.logp.shape[0]
        return (g * (np.exp(self.logp) - self.target) / n,)


def one_hot(labels: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy for integer class labels or per-row soft labels."""
    n, k = logits.shape
    if k < 2:
        raise ShapeError("softmax_cross_entropy needs at least 2 classes")
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if labels.shape[0] != n:
            raise ShapeError(f"{labels.shape[0]} labels for {n} rows")
        if labels.min() < 0 or labels.max() >= k:
            raise ValueError(f"label index out of range [0, {k})")
        target = one_hot(labels.astype(np.int64), k, dtype=logits.dtype)
    else:
        if labels.shape != (n, k):
            raise ShapeError(f"soft labels {labels.shape} do not match logits {logits.shape}")
        target = labels.astype(logits.dtype)
    return SoftmaxCrossEntropy.apply(logits, target=target)
