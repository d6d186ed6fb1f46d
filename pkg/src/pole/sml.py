"""Secure Mapping Layer: query vectors derived from the previous block hash.

For the i-th query vector the 256-bit hash is XORed with itself rotated
left by i bits; that word is repeated until it covers k*D bits and cut into
D consecutive k-bit weights. Applying the layer means decrypting the inner
product of every ciphertext with every query vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import DecodeError, Reader, Writer
from .fe import (CiphertextBatch, FunctionalKey, GroupParams, LogNotFound,
                 decrypt_batch, inner_product_bound)

HASH_BITS = 256
DEFAULT_K = 3
DEFAULT_QUERIES = 32
_MASK = (1 << HASH_BITS) - 1


class SmlDecryptFailed(RuntimeError):
    """Functional keys do not match the query vectors (or the data was tampered with)."""


@dataclass(frozen=True)
class Discretization:
    scale: float
    offset: int
    xmax: int

    def encode(self, w: Writer) -> None:
        w.float(self.scale).int(self.offset).int(self.xmax)

    @classmethod
    def decode(cls, r: Reader) -> Discretization:
        return cls(r.float(), r.int(), r.int())


@dataclass(frozen=True, eq=False)
class SmlWeights:
    z: np.ndarray  # (I, D) int64, entries in [0, 2^k - 1]
    k: int
    source_hash: bytes
    _bytes: bytes = field(default=b"", repr=False, compare=False)

    @property
    def n_queries(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def to_bytes(self) -> bytes:
        if not self._bytes:
            object.__setattr__(self, "_bytes", _pack(self))
        return self._bytes

    def __eq__(self, other) -> bool:
        return isinstance(other, SmlWeights) and self.to_bytes() == other.to_bytes()

    def __hash__(self) -> int:
        return hash(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> SmlWeights:
        return cls.decode(Reader(data))

    def encode(self, w: Writer) -> None:
        w.bytes(self.to_bytes())

    @classmethod
    def decode(cls, r: Reader) -> SmlWeights:
        inner = Reader(r.bytes())
        k, n_q, dim = inner.int(), inner.int(), inner.int()
        source = inner.bytes()
        packed = int.from_bytes(inner.bytes(), "big")
        inner.expect_end()
        total = n_q * dim * k
        pad = (-total) % 8
        if packed & ((1 << pad) - 1):
            raise DecodeError("nonzero padding in packed SML weights")
        packed >>= pad
        mask = (1 << k) - 1
        flat = [(packed >> (total - (j + 1) * k)) & mask for j in range(n_q * dim)]
        return cls(np.array(flat, dtype=np.int64).reshape(n_q, dim), k, source)


def _pack(weights: SmlWeights) -> bytes:
    """(k, I, D, source hash, weights packed as k-bit big-endian fields)."""
    k = weights.k
    acc = 0
    for v in weights.z.ravel().tolist():
        acc = (acc << k) | v
    total = weights.z.size * k
    pad = (-total) % 8
    packed = (acc << pad).to_bytes((total + pad) // 8, "big")
    n_q, dim = weights.z.shape
    return Writer().int(k).int(n_q).int(dim).bytes(weights.source_hash).bytes(packed).getvalue()


def rotl256(x: int, n: int) -> int:
    n %= HASH_BITS
    return ((x << n) | (x >> (HASH_BITS - n))) & _MASK


def primary_weight(phs: bytes, i: int) -> int:
    b = int.from_bytes(phs, "big")
    return b ^ rotl256(b, i)


def generate_sml(phs: bytes, dim: int, n_queries: int = DEFAULT_QUERIES, k: int = DEFAULT_K) -> SmlWeights:
    if len(phs) != HASH_BITS // 8:
        raise ValueError(f"expected a {HASH_BITS}-bit hash, got {8 * len(phs)} bits")
    if k < 1 or n_queries < 1 or dim < 1:
        raise ValueError("k, I and D must all be positive")
    reps = -(-k * dim // HASH_BITS)
    total = reps * HASH_BITS
    mask = (1 << k) - 1
    z = np.empty((n_queries, dim), dtype=np.int64)
    for i in range(1, n_queries + 1):
        word = primary_weight(phs, i)
        master = 0
        for _ in range(reps):
            master = (master << HASH_BITS) | word
        z[i - 1] = [(master >> (total - (j + 1) * k)) & mask for j in range(dim)]
    return SmlWeights(z, k, bytes(phs))


def offset_correction(weights: SmlWeights, disc: Discretization) -> np.ndarray:
    return disc.offset * weights.z.sum(axis=1)


def apply_sml(weights: SmlWeights, ciphertexts: CiphertextBatch, fkeys: list[FunctionalKey],
              disc: Discretization, params: GroupParams) -> np.ndarray:
    """Decrypted SML features, one row per ciphertext, in original feature units.

    Row n, column i is (<x_n, z_i> - offset * sum(z_i)) / scale.
    """
    if len(fkeys) != weights.n_queries:
        raise ValueError(f"need {weights.n_queries} functional keys, got {len(fkeys)}")
    if ciphertexts.dim != weights.dim:
        raise ValueError(f"ciphertext dimension {ciphertexts.dim} != SML dimension {weights.dim}")
    for key, row in zip(fkeys, weights.z):
        if tuple(row.tolist()) != key.z:
            raise SmlDecryptFailed("functional key was issued for a different query vector")
    raw = integer_features(weights, ciphertexts, fkeys, disc, params)
    return (raw - offset_correction(weights, disc)) / disc.scale


def integer_features(weights: SmlWeights, ciphertexts: CiphertextBatch, fkeys: list[FunctionalKey],
                     disc: Discretization, params: GroupParams) -> np.ndarray:
    """The exact decrypted inner products <x_n, z_i> before any correction."""
    bound = inner_product_bound(weights.dim, weights.k, disc.xmax)
    try:
        return decrypt_batch(params, ciphertexts, weights.z, [f.eta for f in fkeys], bound)
    except LogNotFound as exc:
        raise SmlDecryptFailed(str(exc)) from exc
