import struct

import numpy as np
import pytest

from rectangling.flow import FlowField, FlowFormatError, read_flo, write_flo


def test_flo_layout(tmp_path):
    vec = np.arange(2 * 3 * 2, dtype=np.float64).reshape(2, 3, 2) / 4
    write_flo(FlowField(vec), tmp_path / "f.flo")
    data = (tmp_path / "f.flo").read_bytes()
    assert data[:4] == b"PIEH"
    assert struct.unpack("<ii", data[4:12]) == (3, 2)
    assert np.array_equal(np.frombuffer(data[12:], "<f4").reshape(2, 3, 2), vec.astype(np.float32))


def test_flo_round_trip_with_undefined(tmp_path):
    vec = np.random.default_rng(0).normal(size=(4, 5, 2))
    vec[1, 2] = np.nan
    write_flo(FlowField(vec), tmp_path / "f.flo")
    back = read_flo(tmp_path / "f.flo")
    assert np.isnan(back.vectors[1, 2]).all()
    ok = back.defined()
    assert np.allclose(back.vectors[ok], vec[ok], atol=1e-6)


def test_bad_magic(tmp_path):
    (tmp_path / "x.flo").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FlowFormatError):
        read_flo(tmp_path / "x.flo")


def test_truncated(tmp_path):
    (tmp_path / "x.flo").write_bytes(b"PIEH" + struct.pack("<ii", 4, 4) + bytes(8))
    with pytest.raises(FlowFormatError):
        read_flo(tmp_path / "x.flo")
