import struct

import numpy as np
import pytest

from edunet.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    checkpoint_bytes,
    decode_rng_state,
    encode_rng_state,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from edunet.model import EDUNetConfig, edunet_forward, init_params
from edunet.optim import AdamState, PlateauState


@pytest.fixture(scope="module")
def ckpt():
    cfg = EDUNetConfig(num_classes=3, input_size=(32, 32))
    params = init_params(cfg, np.random.default_rng(0))
    adam = AdamState(3, {"global.final.bias": np.arange(3, dtype=np.float32)}, {"global.final.bias": np.ones(3, np.float32)})
    gen = np.random.default_rng(42)
    gen.random(5)
    return Checkpoint(cfg, params, {"lr": 0.01}, 7, adam, PlateauState(0.01, best=0.5), {"shuffle": gen.bit_generator.state})


def test_round_trip_is_bit_exact(tmp_path, ckpt):
    save_checkpoint(ckpt, tmp_path / "a.edun")
    back = load_checkpoint(tmp_path / "a.edun")
    assert back.model_cfg == ckpt.model_cfg and back.epoch == 7 and back.train_cfg == {"lr": 0.01}
    for k, v in ckpt.params.state().items():
        np.testing.assert_array_equal(back.params.state()[k], v)
    np.testing.assert_array_equal(back.adam.m["global.final.bias"], [0, 1, 2])
    assert back.adam.step == 3 and back.plateau == ckpt.plateau
    assert checkpoint_bytes(back) == checkpoint_bytes(ckpt)


def test_rng_state_survives(ckpt):
    back = parse_checkpoint(checkpoint_bytes(ckpt))
    a, b = np.random.default_rng(), np.random.default_rng()
    a.bit_generator.state = ckpt.rng["shuffle"]
    b.bit_generator.state = back.rng["shuffle"]
    np.testing.assert_array_equal(a.random(10), b.random(10))


def test_rng_chunks_are_exact_in_float32():
    gen = np.random.default_rng(2**100 + 17)
    gen.integers(0, 2**32, dtype=np.uint32)  # leaves a buffered uint32
    state = gen.bit_generator.state
    assert decode_rng_state(encode_rng_state(state)) == state
    with pytest.raises(CheckpointError):
        decode_rng_state(np.zeros(5))


def test_forward_bit_identical_after_reload(ckpt):
    back = parse_checkpoint(checkpoint_bytes(ckpt))
    img = np.random.default_rng(1).random((1, 1, 32, 32), dtype=np.float32)
    a = edunet_forward(img, ckpt.params, ckpt.model_cfg)["fused_prob"].data
    b = edunet_forward(img, back.params, back.model_cfg)["fused_prob"].data
    assert a.tobytes() == b.tobytes()


def test_bad_magic(ckpt):
    buf = checkpoint_bytes(ckpt)
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"XXXX" + buf[4:])


def test_bad_version(ckpt):
    buf = checkpoint_bytes(ckpt)
    with pytest.raises(CheckpointError, match="version"):
        parse_checkpoint(MAGIC + struct.pack("<I", 99) + buf[8:])


@pytest.mark.parametrize("cut", [3, 10, 200, -1])
def test_truncation(ckpt, cut):
    buf = checkpoint_bytes(ckpt)
    with pytest.raises(CheckpointError):
        parse_checkpoint(buf[:cut])


def test_trailing_bytes(ckpt):
    with pytest.raises(CheckpointError, match="trailing"):
        parse_checkpoint(checkpoint_bytes(ckpt) + b"\0")


def test_shape_mismatch_against_config(ckpt):
    other = Checkpoint(EDUNetConfig(num_classes=4, input_size=(32, 32)), ckpt.params)
    buf = checkpoint_bytes(other)
    with pytest.raises(CheckpointError, match="does not match"):
        parse_checkpoint(buf)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.edun")
