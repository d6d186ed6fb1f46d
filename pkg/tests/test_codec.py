import struct

import numpy as np
import pytest

from pole.codec import DecodeError, Reader, Writer, int_bytes


def test_int_roundtrip_and_minimal_length():
    for n in (0, 1, 255, 256, 2**64 + 3):
        data = Writer().int(n).getvalue()
        assert Reader(data).int() == n
    assert int_bytes(0) == b""
    assert int_bytes(256) == b"\x01\x00"


def test_non_minimal_int_rejected():
    with pytest.raises(DecodeError):
        Reader(b"\x00\x00\x00\x02\x00\x05").int()


def test_bool_strict():
    assert Reader(b"\x01").bool() is True
    with pytest.raises(DecodeError):
        Reader(b"\x02").bool()


def test_array_roundtrip_little_endian():
    a = np.arange(6, dtype=float).reshape(2, 3) / 7
    data = Writer().array(a).getvalue()
    assert data[-8:] == struct.pack("<d", 5 / 7)
    assert data[:12] == struct.pack(">III", 2, 2, 3)
    r = Reader(data)
    assert np.array_equal(r.array(), a)
    r.expect_end()


def test_truncation_and_trailing_bytes():
    data = Writer().str("hello").getvalue()
    with pytest.raises(DecodeError):
        Reader(data[:-1]).str()
    r = Reader(data + b"x")
    r.str()
    with pytest.raises(DecodeError):
        r.expect_end()


def test_float_big_endian():
    assert Writer().float(1.0).getvalue() == bytes.fromhex("3ff0000000000000")
