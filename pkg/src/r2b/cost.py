"""Static per-sample operation counter.

Binary multiply-accumulates (xnor + popcount lanes) are reported as BOPs;
everything else as FLOPs. Counting convention, per output element unless
noted:

* real conv / linear: one FLOP per multiply-accumulate (fused count)
* BatchNorm (folded to scale + shift): 2
* sign, PReLU, ReLU, tanh, sigmoid, skip add, scale multiply: 1
* binary conv output: 1 to turn the popcount into a real value
* max pooling: k*k - 1 comparisons
* global average pooling: one add per input element, one divide per channel

The gating branch costs its pooling, two small linear layers, the hidden
PReLU, the sigmoid and one multiply per output channel to merge the gate
with the per-channel scale; applying the merged factor is the ordinary
scale multiply.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from r2b.gating import Gate
from r2b.network import (BinaryBlock, BinaryDownsample, ConvUnit, NetConfig, Network, NetVariant,
                         RealDownsample, Stem, TeacherBlock)
from r2b.nn import BatchNorm2d, Conv2d
from r2b.tensor import conv_output_size

FLOPS_PER_MAC = 1
BN_FLOPS = 2
POINTWISE_FLOPS = 1
BINARY_OUTPUT_FLOPS = 1


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    bops: int
    flops: int
    output_shape: Tuple[int, ...]


@dataclass
class OpCount:
    bops: int
    flops: int
    breakdown: List[LayerCost] = field(default_factory=list)

    def __post_init__(self):
        if self.bops != sum(l.bops for l in self.breakdown) or self.flops != sum(l.flops for l in self.breakdown):
            raise ValueError("totals do not match the per-layer breakdown")

    @classmethod
    def from_layers(cls, layers: Sequence[LayerCost]) -> "OpCount":
        layers = list(layers)
        return cls(sum(l.bops for l in layers), sum(l.flops for l in layers), layers)

    def by_kind(self) -> Dict[str, Tuple[int, int]]:
        out: Dict[str, Tuple[int, int]] = {}
        for l in self.breakdown:
            b, f = out.get(l.kind, (0, 0))
            out[l.kind] = (b + l.bops, f + l.flops)
        return out

    def to_json(self) -> str:
        return json.dumps({"bops": self.bops, "flops": self.flops,
                           "layers": [asdict(l) for l in self.breakdown]}, indent=1)

    def table(self) -> str:
        rows = [f"{'layer':<28} {'kind':<12} {'BOPs':>14} {'FLOPs':>14}  output"]
        for l in self.breakdown:
            rows.append(f"{l.name:<28} {l.kind:<12} {l.bops:>14,d} {l.flops:>14,d}  {'x'.join(map(str, l.output_shape))}")
        rows.append(f"{'total':<28} {'':<12} {self.bops:>14,d} {self.flops:>14,d}")
        rows.append(f"BOPs = {self.bops:.4g}   FLOPs = {self.flops:.4g}")
        return "\n".join(rows)


def _numel(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


class _Counter:
    def __init__(self):
        self.layers: List[LayerCost] = []

    def add(self, name, kind, shape, bops=0, flops=0):
        self.layers.append(LayerCost(name, kind, int(bops), int(flops), tuple(int(s) for s in shape)))

    def conv(self, name, shape, cout, k, stride, pad, binary: bool):
        c, h, w = shape
        ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
        if ho < 1 or wo < 1:
            raise CostError(f"{name}: input {h}x{w} too small for k={k}, stride={stride}")
        out = (cout, ho, wo)
        macs = k * k * c * cout * ho * wo
        if binary:
            self.add(name, "binary_conv", out, bops=macs, flops=BINARY_OUTPUT_FLOPS * _numel(out))
        else:
            self.add(name, "conv", out, flops=FLOPS_PER_MAC * macs)
        return out

    def pointwise(self, name, kind, shape, per_element=POINTWISE_FLOPS):
        self.add(name, kind, shape, flops=per_element * _numel(shape))


def _conv_unit(ctr: _Counter, name: str, unit: ConvUnit, shape):
    ctr.pointwise(f"{name}.bn", "batchnorm", shape, BN_FLOPS)
    if unit.binarize_mode != "none":
        ctr.pointwise(f"{name}.binarize", "binarize", shape)
    binary = unit.binarize_mode == "sign" and unit.weight_mode == "binary"
    out = ctr.conv(f"{name}.conv", shape, unit.cout, unit.k, unit.stride, unit.pad, binary)
    if unit.gate is not None:
        _gate(ctr, f"{name}.gate", unit.gate, shape)
    if unit.gate is not None or unit.scaling != "none":
        ctr.pointwise(f"{name}.scale", "scale", out)
    if unit.act is not None:
        ctr.pointwise(f"{name}.act", "activation", out)
    return out


def _gate(ctr: _Counter, name: str, gate: Gate, shape):
    c = shape[0]
    hidden, cout = gate.hidden, gate.cout
    flops = (_numel(shape) + c                # average pool
             + c * hidden + hidden            # first linear
             + hidden                         # PReLU
             + hidden * cout + cout           # second linear
             + cout                           # sigmoid
             + cout)                          # merge with the channel scale
    ctr.add(name, "gating", (cout,), flops=flops)


def _shortcut(ctr: _Counter, name: str, mod, shape):
    if mod is None:
        return shape
    if isinstance(mod, RealDownsample):
        out = ctr.conv(f"{name}.conv", shape, mod.conv.cout, mod.conv.k, mod.conv.stride, mod.conv.pad, False)
        ctr.pointwise(f"{name}.bn", "batchnorm", out, BN_FLOPS)
        return out
    if isinstance(mod, BinaryDownsample):
        return _conv_unit(ctr, name, mod.unit, shape)
    raise CostError(f"{name}: unsupported shortcut {type(mod).__name__}")


def _binary_block(ctr: _Counter, name: str, block: BinaryBlock, shape):
    y1 = _conv_unit(ctr, f"{name}.unit1", block.unit1, shape)
    skip = _shortcut(ctr, f"{name}.shortcut", block.shortcut, shape)
    if block.cfg.double_skip:
        ctr.pointwise(f"{name}.add1", "skip_add", y1)
    y2 = _conv_unit(ctr, f"{name}.unit2", block.unit2, y1)
    ctr.pointwise(f"{name}.add2", "skip_add", y2)
    return y2


def _teacher_block(ctr: _Counter, name: str, block: TeacherBlock, shape):
    h = ctr.conv(f"{name}.conv1", shape, block.conv1.cout, 3, block.conv1.stride, 1, False)
    ctr.pointwise(f"{name}.bn1", "batchnorm", h, BN_FLOPS)
    ctr.pointwise(f"{name}.relu1", "activation", h)
    h = ctr.conv(f"{name}.conv2", h, block.conv2.cout, 3, 1, 1, False)
    ctr.pointwise(f"{name}.bn2", "batchnorm", h, BN_FLOPS)
    _shortcut(ctr, f"{name}.shortcut", block.shortcut, shape)
    ctr.pointwise(f"{name}.add", "skip_add", h)
    ctr.pointwise(f"{name}.relu2", "activation", h)
    return h


def count_ops(net: Network, input_shape: Sequence = (3, 224, 224)) -> OpCount:
    """Per-sample BOPs/FLOPs of ``net`` for a fixed [C,H,W] input."""
    shape = tuple(input_shape)
    if len(shape) == 4:
        shape = shape[1:]
    if len(shape) != 3 or any(not isinstance(s, int) or isinstance(s, bool) or s < 1 for s in shape):
        raise CostError(f"static [C,H,W] input shape required, got {tuple(input_shape)}")
    if shape[0] != net.config.in_channels:
        raise CostError(f"network expects {net.config.in_channels} input channels, got {shape[0]}")
    ctr = _Counter()
    stem: Stem = net.stem
    h = ctr.conv("stem.conv", shape, stem.conv.cout, stem.conv.k, stem.conv.stride, stem.conv.pad, False)
    ctr.pointwise("stem.bn", "batchnorm", h, BN_FLOPS)
    ctr.pointwise("stem.act", "activation", h)
    if stem.imagenet:
        c, hh, ww = h
        h = (c, conv_output_size(hh, 3, 2, 1), conv_output_size(ww, 3, 2, 1))
        ctr.pointwise("stem.maxpool", "pooling", h, 3 * 3 - 1)
    for i, block in enumerate(net.blocks):
        name = f"block{i}"
        if isinstance(block, BinaryBlock):
            h = _binary_block(ctr, name, block, h)
        elif isinstance(block, TeacherBlock):
            h = _teacher_block(ctr, name, block, h)
        else:
            raise CostError(f"{name}: unsupported block {type(block).__name__}")
    if net.head_bn is not None:
        ctr.pointwise("head.bn", "batchnorm", h, BN_FLOPS)
    ctr.add("head.pool", "pooling", (h[0],), flops=_numel(h) + h[0])
    ctr.add("head.fc", "linear", (net.fc.dout,), flops=FLOPS_PER_MAC * net.fc.din * net.fc.dout + net.fc.dout)
    return OpCount.from_layers(ctr.layers)


# ----------------------------------------------------------------------
# ResNet-18 configurations of the method comparison
# ----------------------------------------------------------------------
RESNET18 = NetConfig(num_classes=1000, width=64, blocks=(2, 2, 2, 2), stem="imagenet")

ARCHITECTURES: Dict[str, Tuple[NetVariant, NetConfig]] = {
    "resnet18-real": (NetVariant.REAL_TEACHER, RESNET18),
    "resnet18-bnn": (NetVariant.FULL_BIN, replace(
        RESNET18, downsample="binary", double_skip=False, scaling="none", activation="none", gating=False)),
    "resnet18-xnor": (NetVariant.FULL_BIN, replace(
        RESNET18, downsample="binary", double_skip=False, scaling="analytic", activation="none", gating=False)),
    "resnet18-doubleskip": (NetVariant.FULL_BIN, replace(
        RESNET18, downsample="binary", double_skip=True, scaling="analytic", activation="none", gating=False)),
    "resnet18-bireal": (NetVariant.FULL_BIN, replace(
        RESNET18, downsample="real", double_skip=True, scaling="analytic", activation="none", gating=False)),
    "resnet18-fullbin": (NetVariant.FULL_BIN, replace(
        RESNET18, downsample="real", double_skip=True, scaling="learned", activation="prelu", gating=True)),
}
ARCHITECTURES["resnet18-ours"] = ARCHITECTURES["resnet18-fullbin"]

# published per-sample counts at 224x224 for the configurations above
REFERENCE_COUNTS: Dict[str, Tuple[float, float]] = {
    "resnet18-bnn": (1.695e9, 1.314e8),
    "resnet18-xnor": (1.695e9, 1.333e8),
    "resnet18-doubleskip": (1.695e9, 1.351e8),
    "resnet18-bireal": (1.676e9, 1.544e8),
    "resnet18-fullbin": (1.676e9, 1.564e8),
    "resnet18-real": (0.0, 1.826e9),
}


def build_architecture(name: str, **overrides) -> Network:
    if name not in ARCHITECTURES:
        raise KeyError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
    variant, cfg = ARCHITECTURES[name]
    return Network(variant, replace(cfg, **overrides))


def count_architecture(name: str, input_size: int = 224, **overrides) -> OpCount:
    net = build_architecture(name, **overrides)
    return count_ops(net, (net.config.in_channels, input_size, input_size))
