"""Canonical byte encoding used for hashing and for the chain file.

Integers are unsigned, big-endian, minimal length and prefixed by a 4-byte
length. Reals are 8-byte IEEE-754 doubles (big-endian for scalar fields,
little-endian for model parameter arrays). Strings are UTF-8, length
prefixed. Lists carry a 4-byte count.
"""
from __future__ import annotations

import struct

import numpy as np


class DecodeError(ValueError):
    pass


def int_bytes(n: int) -> bytes:
    if n < 0:
        raise ValueError(f"canonical integers are nonnegative, got {n}")
    return n.to_bytes((n.bit_length() + 7) // 8, "big")


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def int(self, n: int) -> Writer:
        return self.bytes(int_bytes(int(n)))

    def float(self, x: float) -> Writer:
        self._parts.append(struct.pack(">d", float(x)))
        return self

    def bool(self, b: bool) -> Writer:
        self._parts.append(b"\x01" if b else b"\x00")
        return self

    def bytes(self, b: bytes) -> Writer:
        self._parts.append(struct.pack(">I", len(b)))
        self._parts.append(bytes(b))
        return self

    def str(self, s: str) -> Writer:
        return self.bytes(s.encode("utf-8"))

    def count(self, n: int) -> Writer:
        self._parts.append(struct.pack(">I", n))
        return self

    def ints(self, values) -> Writer:
        values = [int(v) for v in np.asarray(values).ravel()]
        self.count(len(values))
        for v in values:
            self.int(v)
        return self

    def array(self, a: np.ndarray) -> Writer:
        """Float array as shape followed by little-endian doubles in C order."""
        a = np.ascontiguousarray(a, dtype="<f8")
        self.count(a.ndim)
        for d in a.shape:
            self.count(d)
        self._parts.append(a.tobytes())
        return self

    def raw(self, b: bytes) -> Writer:
        self._parts.append(bytes(b))
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._buf = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._buf):
            raise DecodeError(f"truncated record: need {n} bytes at offset {self._pos}")
        out = bytes(self._buf[self._pos:self._pos + n])
        self._pos += n
        return out

    def int(self) -> int:
        raw = self.bytes()
        if raw[:1] == b"\x00":
            raise DecodeError("non-minimal integer encoding")
        return int.from_bytes(raw, "big")

    def float(self) -> float:
        return struct.unpack(">d", self._take(8))[0]

    def bool(self) -> bool:
        flag = self._take(1)
        if flag not in (b"\x00", b"\x01"):
            raise DecodeError(f"invalid boolean byte {flag!r}")
        return flag == b"\x01"

    def bytes(self) -> bytes:
        (n,) = struct.unpack(">I", self._take(4))
        return self._take(n)

    def str(self) -> str:
        return self.bytes().decode("utf-8")

    def count(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def ints(self) -> list[int]:
        return [self.int() for _ in range(self.count())]

    def array(self) -> np.ndarray:
        ndim = self.count()
        shape = tuple(self.count() for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self._take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)

    def done(self) -> bool:
        return self._pos == len(self._buf)

    def expect_end(self) -> None:
        if not self.done():
            raise DecodeError(f"{len(self._buf) - self._pos} trailing bytes")
