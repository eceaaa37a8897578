"""Checkpoint container: round trips, f32 quantization, corruption handling."""

import numpy as np
import pytest

from modalsde.checkpoint import (
    net_from_sections,
    net_names,
    read_sections,
    write_checkpoint,
)
from modalsde.errors import FormatError
from modalsde.nn import Adam, DenseNet
from modalsde.rng import child_rng


@pytest.fixture
def nets(rng):
    return {
        "encoder": DenseNet.create([4, 8, 3], "relu", rng),
        "decoder": DenseNet.create([3, 8, 4], ["softplus", "identity"], rng),
    }


def test_round_trip_preserves_structure_and_f32_values(tmp_path, nets):
    path = tmp_path / "model.sbmc"
    write_checkpoint(path, nets)
    sections = read_sections(path)
    assert net_names(sections) == ["decoder", "encoder"]
    for name, net in nets.items():
        back = net_from_sections(sections, name)
        assert back.widths == net.widths
        assert back.activations == net.activations
        np.testing.assert_array_equal(back.params, net.params.astype(np.float32).astype(np.float64))


def test_save_load_save_is_stable(tmp_path, nets):
    """After one f32 quantization, further round trips are bit-exact."""
    p1, p2 = tmp_path / "a.sbmc", tmp_path / "b.sbmc"
    write_checkpoint(p1, nets)
    loaded = {name: net_from_sections(read_sections(p1), name) for name in nets}
    write_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_adam_state_round_trip(tmp_path, nets, rng):
    opt = Adam(lr=1e-3, n_params=nets["encoder"].n_params)
    opt.step(nets["encoder"].params, rng.standard_normal(opt.n_params))
    path = tmp_path / "with_adam.sbmc"
    write_checkpoint(path, nets, adam={"encoder": opt})
    sections = read_sections(path)
    m = np.frombuffer(sections["encoder/adam_m"], dtype="<f4")
    meta = np.frombuffer(sections["encoder/adam_meta"], dtype="<f4")
    np.testing.assert_allclose(m, opt.m, rtol=1e-6)
    assert meta[4] == 1.0  # step counter

def test_extra_sections_survive(tmp_path, nets):
    path = tmp_path / "extra.sbmc"
    write_checkpoint(path, nets, extra={"config_hash": b"abc123", "note": b"\x00\xff"})
    sections = read_sections(path)
    assert sections["config_hash"] == b"abc123"
    assert sections["note"] == b"\x00\xff"


def test_bad_magic_rejected(tmp_path, nets):
    path = tmp_path / "bad.sbmc"
    write_checkpoint(path, nets)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        read_sections(path)


def test_truncated_payload_rejected(tmp_path, nets):
    path = tmp_path / "trunc.sbmc"
    write_checkpoint(path, nets)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 7])
    with pytest.raises(FormatError, match="truncated"):
        read_sections(path)


def test_missing_network_named_in_error(tmp_path, nets):
    path = tmp_path / "one.sbmc"
    write_checkpoint(path, {"encoder": nets["encoder"]})
    with pytest.raises(FormatError, match="ghost"):
        net_from_sections(read_sections(path), "ghost")


def test_write_is_deterministic(tmp_path, nets):
    p1, p2 = tmp_path / "d1.sbmc", tmp_path / "d2.sbmc"
    write_checkpoint(p1, nets, extra={"config_hash": b"x"})
    write_checkpoint(p2, nets, extra={"config_hash": b"x"})
    assert p1.read_bytes() == p2.read_bytes()
