import struct

import numpy as np
import pytest

from inpforge.checkpoint import MAGIC, dumps, load_checkpoint, loads, save_checkpoint
from inpforge.data import build_splits
from inpforge.errors import FormatError
from inpforge.inp import INPFormer
from inpforge.pipeline import predict_maps
from inpforge.train import train

from conftest import tiny_config, tiny_data


@pytest.fixture(scope="module")
def images():
    return np.stack([s.image for s in build_splits(tiny_data(classes=(1,)))["train"]])


@pytest.fixture(scope="module")
def trained(images):
    model, _, state = train(INPFormer(tiny_config(epochs=3)), images)
    return model, state


def test_round_trip_is_bit_exact(tmp_path, trained):
    model, state = trained
    data = save_checkpoint(tmp_path / "m.inpf", model, state)
    assert data[:4] == MAGIC
    ck = load_checkpoint(tmp_path / "m.inpf")
    for name, p in model.params.items():
        assert ck.model.params[name].data.tobytes() == p.data.tobytes()
    for name, p in model.encoder.params.items():
        assert ck.model.encoder.params[name].data.tobytes() == p.data.tobytes()
    assert ck.model.cfg == model.cfg
    assert ck.epoch == 3 and ck.state.history == state.history
    assert ck.state.opt.t == state.opt.t
    assert dumps(ck.model, ck.state) == data
    assert not (tmp_path / "m.inpf.tmp").exists()


def test_equal_seeds_equal_bytes(images):
    a = train(INPFormer(tiny_config(epochs=2)), images)
    b = train(INPFormer(tiny_config(epochs=2)), images)
    assert dumps(a[0], a[2]) == dumps(b[0], b[2])


def test_truncated_file_rejected(trained):
    data = dumps(*trained)
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError):
            loads(data[:cut])


def test_crc_detects_corruption(trained):
    data = bytearray(dumps(*trained))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(FormatError, match="CRC"):
        loads(bytes(data))


def test_version_mismatch_is_explicit(trained):
    data = bytearray(dumps(*trained))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="version 2"):
        loads(bytes(data))


def test_bad_magic(trained):
    data = dumps(*trained)
    with pytest.raises(FormatError, match="magic"):
        loads(b"NOPE" + data[4:])


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "absent.inpf")


def test_resume_equals_uninterrupted(tmp_path, images):
    full_model, _, full_state = train(INPFormer(tiny_config(epochs=4)), images)
    part_model, _, part_state = train(INPFormer(tiny_config(epochs=4)), images, epochs=2)
    save_checkpoint(tmp_path / "half.inpf", part_model, part_state)
    ck = load_checkpoint(tmp_path / "half.inpf")
    resumed, _, resumed_state = train(ck.model, images, state=ck.state)
    assert resumed_state.history == full_state.history
    assert dumps(resumed, resumed_state) == dumps(full_model, full_state)


def test_results_independent_of_thread_setting(monkeypatch, trained, images):
    model, _ = trained
    monkeypatch.setenv("INPFORGE_THREADS", "1")
    one = predict_maps(model, images, chunk=3)
    monkeypatch.setenv("INPFORGE_THREADS", "4")
    four = predict_maps(model, images, chunk=3)
    assert one.tobytes() == four.tobytes()
