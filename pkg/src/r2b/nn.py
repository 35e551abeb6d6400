"""Minimal module system: parameter registration, train/eval mode, state dicts."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Tuple

import numpy as np

from r2b.tensor import BN_EPS, BN_MOMENTUM, Tensor, batchnorm2d, conv2d_ref, linear, prelu


class Parameter(Tensor):
    """Trainable leaf tensor.

    ``decay`` marks parameters eligible for L2 weight decay; ``binary`` is set
    by layers whose forward pass binarizes the parameter (such weights are
    clamped to [-1, 1] after each step and never decayed).
    """

    def __init__(self, data, decay: bool = False):
        arr = np.asarray(data)
        super().__init__(np.array(arr, dtype=np.float64 if arr.dtype == np.float64 else np.float32),
                         requires_grad=True)
        self.decay = decay
        self.binary = False


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover
        raise NotImplementedError

    # -- traversal ------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for prefix, mod in self.named_modules():
            for name, p in mod._params.items():
                yield (f"{prefix}.{name}" if prefix else name), p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for name, b in mod._buffers.items():
                yield (f"{prefix}.{name}" if prefix else name), b

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        missing = [k for k in list(own_params) + list(own_buffers) if k not in state]
        unexpected = [k for k in state if k not in own_params and k not in own_buffers]
        if strict and (missing or unexpected):
            raise KeyError(f"state dict mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in state.items():
            target = own_params.get(name)
            if target is not None:
                if target.shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}: {target.shape} vs {value.shape}")
                target.data = np.array(value, dtype=target.dtype)
            elif name in own_buffers:
                buf = own_buffers[name]
                if buf.shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}: {buf.shape} vs {value.shape}")
                buf[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers (used for 64-bit gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for _, mod in self.named_modules():
            for name, b in list(mod._buffers.items()):
                mod.register_buffer(name, b.astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    """Real-valued convolution without bias."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, k, stride, pad
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k), decay=True)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_ref(x, self.weight, self.stride, self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class PReLU(Module):
    def __init__(self, channels: int = 1, init: float = 0.25):
        super().__init__()
        self.weight = Parameter(np.full(channels, init, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return prelu(x, self.weight)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.relu()


class Linear(Module):
    def __init__(self, din: int, dout: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.din, self.dout = din, dout
        bound = 1.0 / np.sqrt(din)
        self.weight = Parameter(rng.uniform(-bound, bound, (dout, din)).astype(np.float32), decay=True)
        self.bias = Parameter(rng.uniform(-bound, bound, dout).astype(np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
