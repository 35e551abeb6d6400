"""Binary checkpoint container.

Layout (all integers little-endian uint32)::

    b"R2B1" | version | len + variant tag (utf-8) | 32-byte sha256 config digest
    | len + config JSON (utf-8) | entry count
    | per entry: len + name | rank | extents... | float32 LE data

Entries are written in the order given, so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import numpy as np

MAGIC = b"R2B1"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    entries: "OrderedDict[str, np.ndarray]"
    variant: str = ""
    config_json: str = "{}"
    digest: bytes = field(default=b"")

    def __post_init__(self):
        if not self.digest:
            self.digest = hashlib.sha256(f"{self.variant}|{self.config_json}".encode()).digest()


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _u32(len(raw)) + raw


def dumps(ckpt: Checkpoint) -> bytes:
    if len(ckpt.digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_u32(FORMAT_VERSION))
    out.write(_str(ckpt.variant))
    out.write(ckpt.digest)
    out.write(_str(ckpt.config_json))
    out.write(_u32(len(ckpt.entries)))
    for name, arr in ckpt.entries.items():
        arr = np.asarray(arr)
        out.write(_str(name))
        out.write(_u32(arr.ndim))
        for extent in arr.shape:
            out.write(_u32(extent))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an R2B1 checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    variant = r.string()
    digest = r.take(32)
    config_json = r.string()
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(r.u32()):
        name = r.string()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        entries[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError(f"trailing bytes after offset {r.pos}")
    return Checkpoint(entries, variant, config_json, digest)


def save(path: PathLike, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path: PathLike) -> Checkpoint:
    return loads(Path(path).read_bytes())


# -- network helpers ----------------------------------------------------
def network_checkpoint(net, extra: Dict[str, np.ndarray] = None) -> Checkpoint:
    entries = OrderedDict((k, np.asarray(v, dtype=np.float32)) for k, v in net.state_dict().items())
    for k, v in (extra or {}).items():
        entries[k] = np.asarray(v, dtype=np.float32)
    return Checkpoint(entries, net.variant.value, net.config.to_json(), net.digest())


def save_network(net, path: PathLike, extra: Dict[str, np.ndarray] = None) -> None:
    save(path, network_checkpoint(net, extra))


def load_network(path_or_ckpt, variant=None):
    """Rebuild a network from a checkpoint.

    ``variant`` reinterprets the stored parameters as another variant with
    the same topology (e.g. BIN_ACT weights loaded into a FULL_BIN network).
    """
    from r2b.network import NetConfig, Network, NetVariant, config_digest

    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load(path_or_ckpt)
    config = NetConfig.from_dict(json.loads(ckpt.config_json))
    stored = NetVariant.parse(ckpt.variant)
    if config_digest(stored, config) != ckpt.digest:
        raise CheckpointError("config digest mismatch: checkpoint metadata is corrupt")
    net = Network(NetVariant.parse(variant) if variant is not None else stored, config)
    own = set(net.state_dict())
    net.load_state_dict(OrderedDict((k, v) for k, v in ckpt.entries.items() if k in own))
    return net
