import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from focalmod import fmt1
from focalmod.exceptions import ConfigError, InputError
from focalmod.kvfile import format_kv, parse_kv, read_kv
from focalmod.pnm import read_pnm, to_uint8, write_pgm, write_ppm


# ---------------------------------------------------------------- FMT1

def test_fmt1_record_layout():
    buf = io.BytesIO()
    fmt1.write_tensor(buf, np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    raw = buf.getvalue()
    assert raw[:4] == b"FMT1"
    assert struct.unpack("<I", raw[4:8]) == (2,)
    assert struct.unpack("<2I", raw[8:16]) == (1, 3)
    assert raw[16] == 1
    assert np.frombuffer(raw[17:], "<f4").tolist() == [1.0, 2.0, 3.0]


@settings(max_examples=40, deadline=None)
@given(arr=hnp.arrays(st.sampled_from([np.float64, np.float32]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                      elements=st.floats(-1e6, 1e6, width=32)))
def test_fmt1_roundtrip(arr):
    buf = io.BytesIO()
    fmt1.write_tensor(buf, arr)
    fmt1.write_tensor(buf, arr * 2)
    buf.seek(0)
    a, b = fmt1.read_tensor(buf), fmt1.read_tensor(buf)
    assert fmt1.read_tensor(buf) is None
    assert a.dtype == arr.dtype and a.shape == arr.shape
    np.testing.assert_array_equal(a, arr)
    np.testing.assert_array_equal(b, arr * 2)


def test_fmt1_errors():
    with pytest.raises(InputError, match="magic"):
        fmt1.read_tensor(io.BytesIO(b"XXXX"))
    with pytest.raises(InputError, match="truncated"):
        fmt1.read_tensor(io.BytesIO(b"FMT1\x01\x00\x00\x00\x05\x00"))
    with pytest.raises(InputError, match="float64/float32"):
        fmt1.write_tensor(io.BytesIO(), np.zeros(2, dtype=np.int32))
    bad = b"FMT1" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"\x07" + b"\x00" * 8
    with pytest.raises(InputError, match="dtype tag"):
        fmt1.read_tensor(io.BytesIO(bad))
    with pytest.raises(InputError):
        fmt1.load("/nonexistent/file.fmt")


def test_fmt1_named(tmp_path):
    named = {"a": np.arange(6.0).reshape(2, 3), "b": np.float32(3.5) * np.ones(1, np.float32)}
    manifest = fmt1.save_named(tmp_path / "t.fmt", named)
    assert manifest.read_text() == "a 2x3 float64\nb 1 float32\n"
    back = fmt1.load_named(tmp_path / "t.fmt")
    assert list(back) == ["a", "b"]
    np.testing.assert_array_equal(back["a"], named["a"])


# ---------------------------------------------------------------- PNM

def test_pgm_ppm_roundtrip(tmp_path):
    g = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_pgm(tmp_path / "g.pgm", g)
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(read_pnm(tmp_path / "g.pgm"), g)
    c = np.random.default_rng(0).integers(0, 256, size=(2, 5, 3)).astype(np.uint8)
    write_ppm(tmp_path / "c.ppm", c)
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.ppm"), c)


def test_pnm_header_comments(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P5\n# a comment\n2 1\n255\n\x01\x02")
    np.testing.assert_array_equal(read_pnm(tmp_path / "x.pgm"), [[1, 2]])


def test_pnm_errors(tmp_path):
    (tmp_path / "a.pnm").write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(InputError, match="magic"):
        read_pnm(tmp_path / "a.pnm")
    (tmp_path / "b.pgm").write_bytes(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(InputError, match="maxval"):
        read_pnm(tmp_path / "b.pgm")
    (tmp_path / "c.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(InputError, match="pixel bytes"):
        read_pnm(tmp_path / "c.pgm")
    with pytest.raises(InputError):
        write_pgm(tmp_path / "d.pgm", np.zeros((2, 2)))
    with pytest.raises(InputError):
        write_pgm(tmp_path / "missing" / "e.pgm", np.zeros((2, 2), np.uint8))


def test_to_uint8():
    np.testing.assert_array_equal(to_uint8(np.array([[-1.0, 0.0, 1.0]])), [[0, 128, 255]])
    np.testing.assert_array_equal(to_uint8(np.full((2, 2), 3.0)), 0)


# ---------------------------------------------------------------- key=value configs

def test_parse_kv():
    kv = parse_kv("# comment\n a = 1 \n\nb=x,y # trailing\n")
    assert kv == {"a": "1", "b": "x,y"}
    assert parse_kv(format_kv(kv)) == kv


@pytest.mark.parametrize("text", ["novalue\n", "=3\n", "a=1\na=2\n"])
def test_parse_kv_errors(text):
    with pytest.raises(ConfigError, match="<string>:"):
        parse_kv(text)


def test_read_kv_missing(tmp_path):
    with pytest.raises(InputError):
        read_kv(tmp_path / "none.cfg")
