from collections import OrderedDict

import numpy as np
import pytest

from r2b import checkpoint
from r2b.checkpoint import Checkpoint, CheckpointError, dumps, loads
from r2b.network import NetConfig, Network, NetVariant
from r2b.tensor import Tensor

CFG = NetConfig(num_classes=3, width=4, blocks=(1, 1), gating=True)


def sample():
    rng = np.random.default_rng(0)
    return Checkpoint(OrderedDict(w=rng.standard_normal((2, 3)).astype(np.float32),
                                  scalar=np.array(1.5, dtype=np.float32)), "FULL_BIN", '{"a":1}')


def test_byte_round_trip():
    raw = dumps(sample())
    again = loads(raw)
    assert dumps(again) == raw
    assert again.entries["scalar"].shape == ()


def test_layout_header():
    raw = dumps(sample())
    assert raw[:4] == b"R2B1"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len("FULL_BIN")


@pytest.mark.parametrize("cut", [3, 10, 30, 60])
def test_truncation_reports_offset(cut):
    raw = dumps(sample())
    with pytest.raises(CheckpointError, match="offset"):
        loads(raw[:cut] if cut < 10 else raw[:-cut])


def test_trailing_bytes_and_bad_magic():
    raw = dumps(sample())
    with pytest.raises(CheckpointError, match="trailing"):
        loads(raw + b"\0")
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"XXXX" + raw[4:])


def test_network_save_load(tmp_path):
    net = Network(NetVariant.FULL_BIN, CFG)
    net.blocks[0].unit1.bn.running_mean[:] = 0.5
    path = tmp_path / "n.r2b"
    checkpoint.save_network(net, path)
    back = checkpoint.load_network(path)
    assert back.variant == NetVariant.FULL_BIN and back.config == CFG
    for k, v in net.state_dict().items():
        np.testing.assert_array_equal(back.state_dict()[k], v)
    checkpoint.save_network(back, tmp_path / "m.r2b")
    assert (tmp_path / "m.r2b").read_bytes() == path.read_bytes()


def test_digest_mismatch_detected(tmp_path):
    ck = checkpoint.network_checkpoint(Network(NetVariant.BIN_ACT, CFG))
    ck.digest = bytes(32)
    with pytest.raises(CheckpointError, match="digest"):
        checkpoint.load_network(ck)


def test_bin_act_to_full_bin_hand_off_is_exact():
    src = Network(NetVariant.BIN_ACT, CFG)
    rng = np.random.default_rng(5)
    for p in src.parameters():
        p.data[:] = rng.standard_normal(p.shape)
    dst = checkpoint.load_network(checkpoint.network_checkpoint(src), NetVariant.FULL_BIN)
    assert dst.variant == NetVariant.FULL_BIN
    s, d = src.state_dict(), dst.state_dict()
    assert list(s) == list(d)
    for k in s:
        assert np.array_equal(s[k], d[k]), k


def test_load_state_dict_strict_mismatch():
    net = Network(NetVariant.FULL_BIN, CFG)
    state = net.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(Exception):
        net.load_state_dict(state)
