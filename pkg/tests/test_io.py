import numpy as np
import pytest

from inpforge.errors import DataError, FormatError
from inpforge.io import heatmap_u8, load_pgm, load_ptf, ptf_dumps, ptf_loads, quantize, save_pgm, save_ptf


def test_ptf_round_trip(tmp_path, rng):
    arr = rng.standard_normal((2, 3, 4)).astype(np.float32)
    save_ptf(tmp_path / "a.ptf", arr)
    out = load_ptf(tmp_path / "a.ptf")
    assert out.dtype == np.float32 and out.tobytes() == arr.tobytes()


def test_ptf_header_layout():
    blob = ptf_dumps(np.zeros((2, 5)))
    assert blob[:4] == b"PTF1" and blob[4] == 2
    assert blob[5:13] == (2).to_bytes(4, "little") + (5).to_bytes(4, "little")
    assert len(blob) == 13 + 40


def test_ptf_truncated_and_trailing(tmp_path):
    blob = ptf_dumps(np.ones(4))
    with pytest.raises(FormatError):
        ptf_loads(blob[:-1])
    with pytest.raises(FormatError):
        ptf_loads(b"XXXX" + blob[4:])
    (tmp_path / "t.ptf").write_bytes(blob + b"\0")
    with pytest.raises(FormatError):
        load_ptf(tmp_path / "t.ptf")


def test_pgm_round_trip(tmp_path, rng):
    img = quantize(rng.uniform(size=(7, 5)))
    save_pgm(tmp_path / "x.pgm", img)
    raw = (tmp_path / "x.pgm").read_bytes()
    assert raw.startswith(b"P5\n5 7\n255\n")
    back = load_pgm(tmp_path / "x.pgm")
    assert back.shape == (7, 5)
    assert np.array_equal(back.astype(np.float32) / np.float32(255), img)


def test_pgm_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\x00\xff")
    assert load_pgm(tmp_path / "c.pgm").tolist() == [[0, 255]]


def test_pgm_errors(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        load_pgm(tmp_path / "a.pgm")
    (tmp_path / "b.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(FormatError):
        load_pgm(tmp_path / "b.pgm")
    with pytest.raises(DataError):
        load_pgm(tmp_path / "missing.pgm")
    with pytest.raises(FormatError):
        save_pgm(tmp_path / "c.pgm", np.zeros((2, 2, 3)))


def test_heatmap_scaling():
    assert heatmap_u8(np.array([0.0, 0.5, 1.0])).tolist() == [0, 128, 255]
    assert heatmap_u8(np.ones(3)).tolist() == [0, 0, 0]
    assert heatmap_u8(np.array([2.0]), lo=0.0, hi=4.0).tolist() == [128]
