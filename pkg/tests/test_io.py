import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taigan import io
from taigan.motion import BSplineField
from taigan.phantom import DynamicSeries


def _series(rng, shape=(3, 4, 5, 6)):
    starts = np.arange(shape[0]) * 5.0
    return DynamicSeries(rng.normal(size=shape) * 100, starts, np.full(shape[0], 5.0))


def test_dpv_round_trip_is_bit_exact(tmp_path):
    s = _series(np.random.default_rng(0))
    io.write_dpv(tmp_path / "a.dpv", s, (3.125, 3.125, 3.27))
    back, voxel = io.read_dpv(tmp_path / "a.dpv")
    np.testing.assert_array_equal(back.frames, s.frames.astype(np.float32))
    np.testing.assert_array_equal(back.frame_start, s.frame_start)
    assert voxel == tuple(float(np.float32(v)) for v in (3.125, 3.125, 3.27))
    io.write_dpv(tmp_path / "b.dpv", back, voxel)
    assert (tmp_path / "a.dpv").read_bytes() == (tmp_path / "b.dpv").read_bytes()


def test_dpv_header_layout(tmp_path):
    s = _series(np.random.default_rng(1), (2, 2, 3, 4))
    io.write_dpv(tmp_path / "a.dpv", s)
    raw = (tmp_path / "a.dpv").read_bytes()
    assert raw[:4] == b"DPV1"
    assert struct.unpack_from("<H3I3fI", raw, 4) == (1, 2, 3, 4, 1.0, 1.0, 1.0, 2)
    head = 4 + 2 + 12 + 12 + 4
    assert struct.unpack_from("<4f", raw, head) == (0.0, 5.0, 5.0, 5.0)
    assert len(raw) == head + 16 + 4 * 2 * 24
    # frame-major voxel data
    first = np.frombuffer(raw, "<f4", 24, head + 16).reshape(2, 3, 4)
    np.testing.assert_array_equal(first, s.frames[0].astype(np.float32))


def test_dpv_rejects_bad_files(tmp_path):
    s = _series(np.random.default_rng(2))
    io.write_dpv(tmp_path / "a.dpv", s)
    raw = (tmp_path / "a.dpv").read_bytes()
    (tmp_path / "magic.dpv").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.dpv").write_bytes(raw[:-4])
    (tmp_path / "version.dpv").write_bytes(raw[:4] + struct.pack("<H", 2) + raw[6:])
    with pytest.raises(io.FormatError, match="magic"):
        io.read_dpv(tmp_path / "magic.dpv")
    with pytest.raises(io.FormatError, match="size"):
        io.read_dpv(tmp_path / "short.dpv")
    with pytest.raises(io.FormatError, match="version"):
        io.read_dpv(tmp_path / "version.dpv")
    with pytest.raises(FileNotFoundError):
        io.read_dpv(tmp_path / "missing.dpv")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)))
def test_dpv_round_trip_property(tmp_path_factory, seed, shape):
    d = tmp_path_factory.mktemp("dpv")
    s = _series(np.random.default_rng(seed), shape)
    io.write_dpv(d / "x.dpv", s)
    back, _ = io.read_dpv(d / "x.dpv")
    np.testing.assert_array_equal(back.frames, s.frames.astype(np.float32))


def test_labels_volume(tmp_path):
    labels = np.random.default_rng(3).integers(0, 4, (4, 4, 4))
    io.write_volume(tmp_path / "l.dpv", labels)
    np.testing.assert_array_equal(io.read_labels(tmp_path / "l.dpv"), labels)
    io.write_volume(tmp_path / "bad.dpv", labels + 0.5)
    with pytest.raises(io.FormatError, match="integers"):
        io.read_labels(tmp_path / "bad.dpv")


def test_tgf_round_trip(tmp_path):
    f = BSplineField(np.random.default_rng(4).normal(size=(5, 6, 4, 3)).astype(np.float32), 8.0)
    io.write_tgf(tmp_path / "f.tgf", f)
    raw = (tmp_path / "f.tgf").read_bytes()
    assert raw[:4] == b"TGF1" and struct.unpack_from("<3If", raw, 4) == (5, 6, 4, 8.0)
    g = io.read_tgf(tmp_path / "f.tgf")
    np.testing.assert_array_equal(g.coeffs, f.coeffs)
    assert g.spacing == 8.0
    (tmp_path / "t.tgf").write_bytes(raw[:-1])
    with pytest.raises(io.FormatError):
        io.read_tgf(tmp_path / "t.tgf")


def test_tac_csv(tmp_path):
    tacs = {"rvbp": np.array([1.0, 2.0]), "lvbp": np.array([0.5, 3.0]), "myo": np.array([0.0, 0.25])}
    io.write_tacs(tmp_path / "t.csv", [0.0, 5.0], [5.0, 5.0], tacs)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "frame_start,duration,rvbp,lvbp,myo"
    back = io.read_tacs(tmp_path / "t.csv")
    np.testing.assert_array_equal(back["lvbp"], tacs["lvbp"])
    (tmp_path / "bad.csv").write_text("frame_start,rvbp\n0,1\n")
    with pytest.raises(io.FormatError, match="duration"):
        io.read_tacs(tmp_path / "bad.csv")
