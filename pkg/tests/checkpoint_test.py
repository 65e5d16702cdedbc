"""
Tests for module state handling and the binary checkpoint format.
"""

import struct

import numpy as np
import pytest

from src.latent_domain_transfer.checkpoint import (
    MAGIC,
    deserialize_state,
    file_digest,
    load_module,
    save_module,
    serialize_state,
    state_digest,
)
from src.latent_domain_transfer.exceptions import FormatError, MissingPrerequisiteError, ShapeError
from src.latent_domain_transfer.layers import BatchNorm, Linear, Module
from src.latent_domain_transfer.vae import VaeModel


class TinyNet(Module):
    def __init__(self, rng, width=3):
        self.layers = [Linear(2, width, rng), Linear(width, 1, rng)]
        self.norm = BatchNorm(width)


def tiny_vae(seed: int) -> VaeModel:
    return VaeModel(1, latent_dim=4, base_channels=2, encoder_hidden=8, rng=np.random.default_rng(seed))


def test_state_dict_names_follow_attributes(rng):
    names = list(TinyNet(rng).state_dict())
    assert names == [
        "layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias",
        "norm.gamma", "norm.beta", "norm.running_mean", "norm.running_var",
    ]


def test_serialized_layout():
    state = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    payload = serialize_state(state)
    assert payload[:4] == MAGIC
    assert struct.unpack("<II", payload[4:12]) == (1, 1)
    assert struct.unpack("<I", payload[12:16]) == (3,)
    assert payload[16:19] == b"a.w"
    assert struct.unpack("<III", payload[19:31]) == (2, 2, 3)
    np.testing.assert_array_equal(np.frombuffer(payload[31:], dtype="<f4"), np.arange(6))


def test_vae_checkpoint_round_trip(tmp_path):
    source, target = tiny_vae(1), tiny_vae(2)
    source.decoder.bn1.stats.running_mean[:] = 0.25
    path = save_module(source, tmp_path / "vae_1.lbck", "vae_1")
    load_module(target, path, "vae_1")
    for (name, a), b in zip(source.state_dict().items(), target.state_dict().values()):
        np.testing.assert_array_equal(a, b, err_msg=name)
    assert state_digest(source.state_dict()) == state_digest(target.state_dict())


def test_saving_twice_gives_identical_bytes(tmp_path):
    vae = tiny_vae(3)
    first = save_module(vae, tmp_path / "a.lbck", "vae_1")
    second = save_module(vae, tmp_path / "b.lbck", "vae_1")
    assert file_digest(first) == file_digest(second)


def test_digest_changes_with_parameters(rng):
    net = TinyNet(rng)
    before = state_digest(net.state_dict())
    net.layers[0].bias.data = net.layers[0].bias.data + 1.0
    assert state_digest(net.state_dict()) != before


def test_wrong_magic_and_truncation():
    payload = serialize_state({"x": np.ones(4, dtype=np.float32)})
    with pytest.raises(FormatError):
        deserialize_state(b"XXXX" + payload[4:])
    with pytest.raises(FormatError):
        deserialize_state(payload[:-3])
    with pytest.raises(FormatError):
        deserialize_state(payload + b"\x00")
    with pytest.raises(FormatError):
        deserialize_state(MAGIC + struct.pack("<II", 7, 0))


def test_load_rejects_other_prefix(tmp_path):
    path = save_module(tiny_vae(1), tmp_path / "vae.lbck", "vae_1")
    with pytest.raises(FormatError):
        load_module(tiny_vae(1), path, "vae_2")


def test_load_missing_file(tmp_path):
    with pytest.raises(MissingPrerequisiteError):
        load_module(tiny_vae(1), tmp_path / "absent.lbck", "vae_1")


def test_load_rejects_other_architecture(tmp_path, rng):
    path = save_module(TinyNet(rng, width=3), tmp_path / "net.lbck", "net")
    with pytest.raises(ShapeError):
        load_module(TinyNet(rng, width=4), path, "net")


def test_train_eval_and_requires_grad_propagate(rng):
    net = TinyNet(rng)
    net.eval()
    assert not net.norm.training and not net.layers[1].training
    net.train()
    assert net.norm.training
    net.requires_grad_(False)
    assert not any(param.requires_grad for param in net.parameters())
