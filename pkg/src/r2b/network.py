"""Real-to-binary ResNet blocks and the ResNet-18-style network builder.

A binary conv unit runs BatchNorm -> binarize -> conv -> scale (-> gate)
-> PReLU and is wrapped by its own skip connection (double skip). The same
topology serves the soft (tanh), binary-activation and fully binary
variants, so their parameters are interchangeable; the real teacher is a
standard post-activation ResNet with matching stage widths.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from r2b.autograd import sign_ste, tanh_soft_binarize
from r2b.binconv import analytic_alpha, binary_conv2d, pack, scale_output
from r2b.gating import DEFAULT_RATIO, Gate, rescale
from r2b.nn import BatchNorm2d, Conv2d, Linear, Module, Parameter, PReLU, ReLU, kaiming_uniform
from r2b.tensor import ShapeError, Tensor, conv2d_ref, global_avg_pool, max_pool2d, no_grad


class NetVariant(str, enum.Enum):
    REAL_TEACHER = "REAL_TEACHER"
    REAL_SOFT = "REAL_SOFT"
    BIN_ACT = "BIN_ACT"
    FULL_BIN = "FULL_BIN"

    @classmethod
    def parse(cls, value) -> "NetVariant":
        if isinstance(value, cls):
            return value
        return cls(str(value).upper().replace("-", "_"))


# (activation binarization, weight mode) for each binary-architecture variant
_VARIANT_MODES = {
    NetVariant.REAL_SOFT: ("tanh", "real"),
    NetVariant.BIN_ACT: ("sign", "real"),
    NetVariant.FULL_BIN: ("sign", "binary"),
}


@dataclass(frozen=True)
class NetConfig:
    """Width/depth and block options shared by every variant of one network."""

    num_classes: int = 10
    width: int = 64
    blocks: Tuple[int, ...] = (2, 2, 2, 2)
    stem: str = "cifar"
    in_channels: int = 3
    downsample: str = "real"
    gating: bool = False
    gate_ratio: int = DEFAULT_RATIO
    double_skip: bool = True
    scaling: str = "learned"
    activation: str = "prelu"
    prelu_per_channel: bool = True
    head_bn: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.width < 1 or not self.blocks or min(self.blocks) < 1:
            raise ValueError(f"invalid width/blocks: {self.width} / {self.blocks}")
        _check_choice("stem", self.stem, ("cifar", "imagenet"))
        _check_choice("downsample", self.downsample, ("real", "binary"))
        _check_choice("scaling", self.scaling, ("learned", "analytic", "none"))
        _check_choice("activation", self.activation, ("prelu", "none"))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = tuple(d["blocks"])
        return cls(**d)


def _check_choice(name, value, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {choices}, got {value!r}")


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    stride: int = 1
    binarize: str = "sign"
    weight_mode: str = "binary"
    gating: bool = False
    downsample_mode: str = "real"
    double_skip: bool = True
    scaling: str = "learned"
    activation: str = "prelu"
    gate_ratio: int = DEFAULT_RATIO
    prelu_per_channel: bool = True


def config_digest(variant: NetVariant, config: NetConfig) -> bytes:
    return hashlib.sha256(f"{variant.value}|{config.to_json()}".encode()).digest()


def binarize(x: Tensor, mode: str) -> Tensor:
    if mode == "sign":
        return sign_ste(x)
    if mode == "tanh":
        return tanh_soft_binarize(x)
    if mode == "none":
        return x
    raise ValueError(f"unknown binarization {mode!r}")


class ConvUnit(Module):
    """BatchNorm -> binarize -> conv -> scale/gate -> activation (no skip)."""

    def __init__(self, cin: int, cout: int, k: int, stride: int, cfg: BlockConfig, rng,
                 activation: Optional[str] = None, gating: Optional[bool] = None):
        super().__init__()
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, k, stride, k // 2
        self.binarize_mode, self.weight_mode, self.scaling = cfg.binarize, cfg.weight_mode, cfg.scaling
        self.engine = "float"
        self.bn = BatchNorm2d(cin)
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k), decay=True)
        self.weight.binary = cfg.weight_mode == "binary"
        if cfg.scaling == "learned":
            # stored as a logarithm so the factor stays positive
            self.log_gamma = Parameter(np.zeros(cout, dtype=np.float32))
        gating = cfg.gating if gating is None else gating
        self.gate = Gate(cin, cout, cfg.gate_ratio, rng) if gating else None
        activation = cfg.activation if activation is None else activation
        self.act = PReLU(cout if cfg.prelu_per_channel else 1) if activation == "prelu" else None

    def effective_weight(self) -> Tensor:
        return sign_ste(self.weight) if self.weight_mode == "binary" else self.weight

    def _conv(self, a: Tensor) -> Tensor:
        packed_ok = (self.engine == "packed" and not self.training
                     and self.binarize_mode == "sign" and self.weight_mode == "binary")
        if packed_ok:
            with no_grad():
                w = np.where(self.weight.data >= 0, 1.0, -1.0)
                out = binary_conv2d(pack(a.data), pack(w), self.stride, self.pad)
            return Tensor(out.data.astype(a.dtype))
        return conv2d_ref(a, self.effective_weight(), self.stride, self.pad)

    def scale_factor(self) -> Optional[Tensor]:
        if self.scaling == "learned":
            return self.log_gamma.exp()
        if self.scaling == "analytic":
            return analytic_alpha(self.weight)
        return None

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        if x.shape[1] != self.cin:
            raise ShapeError(f"conv unit expects {self.cin} channels, got {x.shape[1]}")
        h = self.bn(x)
        y = self._conv(binarize(h, self.binarize_mode))
        factor = self.scale_factor()
        if self.gate is not None:
            if factor is None:
                factor = Tensor(np.ones(self.cout, dtype=y.dtype))
            y = rescale(y, factor, self.gate(h))
        elif factor is not None:
            y = scale_output(y, factor)
        if self.act is not None:
            y = self.act(y)
        return y, h


class RealDownsample(Module):
    """1x1 strided real-valued projection followed by BatchNorm."""

    def __init__(self, cin: int, cout: int, stride: int, rng):
        super().__init__()
        self.conv = Conv2d(cin, cout, 1, stride, 0, rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class BinaryDownsample(Module):
    def __init__(self, cin: int, cout: int, stride: int, cfg: BlockConfig, rng):
        super().__init__()
        self.unit = ConvUnit(cin, cout, 1, stride, cfg, rng, activation="none", gating=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.unit(x)[0]


class BinaryBlock(Module):
    """Two conv units; a skip wraps each unit (or the pair when double_skip is off)."""

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.unit1 = ConvUnit(cfg.in_channels, cfg.out_channels, 3, cfg.stride, cfg, rng)
        self.unit2 = ConvUnit(cfg.out_channels, cfg.out_channels, 3, 1, cfg, rng)
        self.shortcut = None
        if cfg.stride != 1 or cfg.in_channels != cfg.out_channels:
            if cfg.downsample_mode == "real":
                self.shortcut = RealDownsample(cfg.in_channels, cfg.out_channels, cfg.stride, rng)
            else:
                self.shortcut = BinaryDownsample(cfg.in_channels, cfg.out_channels, cfg.stride, cfg, rng)

    def skip(self, x: Tensor) -> Tensor:
        return x if self.shortcut is None else self.shortcut(x)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor, Tuple[Tensor, Tensor]]:
        if self.cfg.double_skip:
            y1, h1 = self.unit1(x)
            y1 = y1 + self.skip(x)
            y2, h2 = self.unit2(y1)
            y = y2 + y1
        else:
            y1, h1 = self.unit1(x)
            y2, h2 = self.unit2(y1)
            y = y2 + self.skip(x)
        return y, y, (h1, h2)


class TeacherBlock(Module):
    """Standard ResNet basic block: conv-BN-ReLU-conv-BN, add shortcut, ReLU."""

    def __init__(self, cin: int, cout: int, stride: int, rng):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng)
        self.bn2 = BatchNorm2d(cout)
        self.shortcut = RealDownsample(cin, cout, stride, rng) if (stride != 1 or cin != cout) else None

    def forward(self, x: Tensor):
        h = self.bn1(self.conv1(x)).relu()
        h = self.bn2(self.conv2(h))
        sc = x if self.shortcut is None else self.shortcut(x)
        y = (h + sc).relu()
        return y, y, ()


class Stem(Module):
    def __init__(self, cfg: NetConfig, real: bool, rng):
        super().__init__()
        self.imagenet = cfg.stem == "imagenet"
        k, s, p = (7, 2, 3) if self.imagenet else (3, 1, 1)
        self.conv = Conv2d(cfg.in_channels, cfg.width, k, s, p, rng)
        self.bn = BatchNorm2d(cfg.width)
        self.act = ReLU() if real else PReLU(cfg.width if cfg.prelu_per_channel else 1)

    def forward(self, x: Tensor) -> Tensor:
        y = self.act(self.bn(self.conv(x)))
        if self.imagenet:
            y = max_pool2d(y, 3, 2, 1)
        return y


class Network(Module):
    def __init__(self, variant: NetVariant, config: NetConfig):
        super().__init__()
        self.variant, self.config = variant, config
        rng = np.random.default_rng(config.seed)
        real = variant == NetVariant.REAL_TEACHER
        self.stem = Stem(config, real, rng)
        self.blocks: List[Module] = []
        cin = config.width
        for stage, count in enumerate(config.blocks):
            cout = config.width * (2 ** stage)
            for i in range(count):
                stride = 2 if (stage > 0 and i == 0) else 1
                if real:
                    block = TeacherBlock(cin, cout, stride, rng)
                else:
                    act_mode, weight_mode = _VARIANT_MODES[variant]
                    block = BinaryBlock(BlockConfig(
                        cin, cout, stride, act_mode, weight_mode, config.gating, config.downsample,
                        config.double_skip, config.scaling, config.activation, config.gate_ratio,
                        config.prelu_per_channel), rng)
                self._modules[f"block{len(self.blocks)}"] = block
                self.blocks.append(block)
                cin = cout
        self.out_channels = cin
        self.head_bn = BatchNorm2d(cin) if (config.head_bn and not real) else None
        self.fc = Linear(cin, config.num_classes, rng)

    @property
    def num_transfer_points(self) -> int:
        return len(self.blocks)

    def set_engine(self, engine: str) -> "Network":
        """Select "float" (default) or "packed" (xnor-popcount, eval only) convolutions."""
        if engine not in ("float", "packed"):
            raise ValueError(engine)
        for _, mod in self.named_modules():
            if isinstance(mod, ConvUnit):
                mod.engine = engine
        return self

    def forward_with_transfer_points(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = self.stem(x)
        transfers = []
        for block in self.blocks:
            h, t, _ = block(h)
            transfers.append(t)
        if self.head_bn is not None:
            h = self.head_bn(h)
        logits = self.fc(global_avg_pool(h))
        return logits, transfers

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_transfer_points(x)[0]

    def decay_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.decay and not p.binary]

    def binary_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.binary]

    def digest(self) -> bytes:
        return config_digest(self.variant, self.config)


def build_network(variant, num_classes: int = 10, width_config: Optional[NetConfig] = None, **overrides) -> Network:
    """Instantiate one variant. ``width_config`` fixes depth/width/block options."""
    variant = NetVariant.parse(variant)
    cfg = width_config or NetConfig()
    cfg = replace(cfg, num_classes=num_classes, **overrides)
    return Network(variant, cfg)


def block_forward(x: Tensor, block: Module):
    """Run one block: returns (output, transfer activation, pre-binarization activations)."""
    return block(x)


def forward_with_transfer_points(net: Network, x) -> Tuple[Tensor, List[Tensor]]:
    return net.forward_with_transfer_points(x)
