import struct

import numpy as np
import pytest

from steerdec.checkpoint import MAGIC, decode, encode, load_checkpoint, save_checkpoint
from steerdec.errors import CheckpointError, MissingArtifactError
from steerdec.models import Role, SteeringVariant
from steerdec.steering import SteeringState


@pytest.fixture
def model(drafter):
    return drafter.clone(dtype=np.float32)


def test_save_and_load_is_bit_exact(tmp_path, model, verifier_config):
    steering = SteeringState.init(SteeringVariant.COND_BIAS_IN_MLP, verifier_config, model.config, seed=2)
    path = save_checkpoint(tmp_path / "ckpt" / "drafter.sd2c", model, steering, {"mode": "sd2"})
    assert not path.with_suffix(".sd2c.tmp").exists()
    ckpt = load_checkpoint(path)
    assert ckpt.meta == {"mode": "sd2"}
    assert ckpt.model.role is Role.DRAFTER
    assert ckpt.model.config == model.config
    for name, p in model.parameters().items():
        assert np.array_equal(ckpt.model.params[name].data, p.data)
    assert ckpt.steering.variant is SteeringVariant.COND_BIAS_IN_MLP
    for name, p in steering.parameters().items():
        assert np.array_equal(ckpt.steering.params[name].data, p.data)


def test_model_without_steering(model):
    ckpt = decode(encode(model))
    assert ckpt.steering is None
    assert set(ckpt.model.params) == set(model.params)


def test_prefix_layout(model):
    blob = encode(model)
    magic, version, header_len = struct.unpack_from("<4sII", blob)
    assert magic == MAGIC and version == 1
    assert blob[12 : 12 + header_len].startswith(b"{")


def test_corrupt_checkpoints(model):
    blob = encode(model)
    with pytest.raises(CheckpointError):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        decode(blob[:-4])
    with pytest.raises(CheckpointError):
        decode(blob[:6])
    with pytest.raises(CheckpointError):
        decode(blob[:4] + struct.pack("<I", 9) + blob[8:])


def test_only_float32_is_written(drafter):
    with pytest.raises(CheckpointError):
        encode(drafter)


def test_missing_file(tmp_path):
    with pytest.raises(MissingArtifactError) as e:
        load_checkpoint(tmp_path / "nope.sd2c")
    assert e.value.missing == [str(tmp_path / "nope.sd2c")]
