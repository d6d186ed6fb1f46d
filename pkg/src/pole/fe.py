"""Inner-product functional encryption over a prime-order subgroup of Z_q^*.

The group is the subgroup of quadratic residues modulo a safe prime
``q = 2p + 1``; it has prime order ``p`` and is generated by any residue
other than 1. Ciphertexts hide a nonnegative integer vector; a functional
key for a query vector ``z`` recovers only the inner product, as the
discrete log of a group element, found by baby-step giant-step inside a
caller-supplied bound.

Everything here is a simulator-grade construction: small parameters, no
constant-time arithmetic.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .codec import Reader, Writer

DEFAULT_LAMBDA = 32
MIN_LAMBDA = 16
# Largest modulus for which the uint64 vectorized arithmetic is exact.
_VECTOR_MAX_BITS = 48
# Baby-step table size used by the batch solver.
_BATCH_BABY_STEPS = 1 << 16


class LogNotFound(ValueError):
    """No exponent in [0, bound] maps to the given group element."""


# Deterministic Miller-Rabin witnesses, valid for n < 3.3e24.
_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41)


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    for b in _MR_BASES:
        if n % b == 0:
            return n == b
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def _rng(seed) -> random.Random:
    return seed if isinstance(seed, random.Random) else random.Random(seed)


@dataclass(frozen=True)
class GroupParams:
    p: int
    q: int
    g: int
    lam: int

    def validate(self) -> None:
        if not is_prime(self.p):
            raise ValueError("group order p is not prime")
        if self.q != 2 * self.p + 1 or not is_prime(self.q):
            raise ValueError("q must be the safe prime 2p + 1")
        if self.g in (0, 1) or pow(self.g, self.p, self.q) != 1:
            raise ValueError("g does not generate the order-p subgroup")

    def encode(self, w: Writer) -> None:
        w.int(self.p).int(self.q).int(self.g).int(self.lam)

    @classmethod
    def decode(cls, r: Reader) -> GroupParams:
        return cls(r.int(), r.int(), r.int(), r.int())

    def to_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()


def group_gen(lam: int = DEFAULT_LAMBDA, seed=None, *, min_lambda: int = MIN_LAMBDA) -> GroupParams:
    """Sample a lam-bit prime p with q = 2p + 1 prime, and a generator of order p."""
    if lam < min_lambda:
        raise ValueError(f"lambda must be at least {min_lambda}, got {lam}")
    rng = _rng(seed)
    while True:
        p = rng.getrandbits(lam) | (1 << (lam - 1)) | 1
        if is_prime(p) and is_prime(2 * p + 1):
            break
    q = 2 * p + 1
    while True:
        # squares of nonidentity elements generate the quadratic residues
        g = pow(rng.randrange(2, q - 1), 2, q)
        if g != 1:
            return GroupParams(p, q, g, lam)


@dataclass(frozen=True)
class MasterKeys:
    params: GroupParams
    s: tuple[int, ...]
    h: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.s)

    def encode(self, w: Writer) -> None:
        self.params.encode(w)
        w.ints(self.s).ints(self.h)

    @classmethod
    def decode(cls, r: Reader) -> MasterKeys:
        return cls(GroupParams.decode(r), tuple(r.ints()), tuple(r.ints()))


def keygen(params: GroupParams, dim: int, seed=None) -> MasterKeys:
    if dim < 1:
        raise ValueError("dimension must be positive")
    rng = _rng(seed)
    s = tuple(rng.randrange(params.p) for _ in range(dim))
    h = tuple(pow(params.g, si, params.q) for si in s)
    return MasterKeys(params, s, h)


@dataclass(frozen=True)
class Ciphertext:
    ct0: int
    ct: tuple[int, ...]

    def encode(self, w: Writer) -> None:
        w.int(self.ct0).ints(self.ct)

    @classmethod
    def decode(cls, r: Reader) -> Ciphertext:
        return cls(r.int(), tuple(r.ints()))


@dataclass(frozen=True)
class FunctionalKey:
    eta: int
    z: tuple[int, ...]

    def encode(self, w: Writer) -> None:
        w.int(self.eta).ints(self.z)

    @classmethod
    def decode(cls, r: Reader) -> FunctionalKey:
        return cls(r.int(), tuple(r.ints()))


def discretize(x, scale: float, offset: int, xmax: int) -> np.ndarray:
    """x -> clamp(round(x * scale) + offset, 0, xmax) as int64."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot discretize non-finite values")
    if scale <= 0 or offset < 0 or xmax <= 0:
        raise ValueError("need scale > 0, offset >= 0, xmax > 0")
    return np.clip(np.rint(x * scale).astype(np.int64) + offset, 0, xmax)


def encrypt(keys: MasterKeys, params: GroupParams, xt: Sequence[int], r_seed=None) -> Ciphertext:
    xt = [int(v) for v in np.asarray(xt).ravel()]
    if len(xt) != keys.dim:
        raise ValueError(f"plaintext has dimension {len(xt)}, keys have {keys.dim}")
    if any(v < 0 or v >= params.p for v in xt):
        raise ValueError("plaintext components must lie in Z_p")
    q, g = params.q, params.g
    r = _rng(r_seed).randrange(params.p)
    ct = tuple(pow(hi, r, q) * pow(g, xi, q) % q for hi, xi in zip(keys.h, xt))
    return Ciphertext(pow(g, r, q), ct)


def derive_functional_key(keys: MasterKeys, z: Sequence[int]) -> FunctionalKey:
    z = tuple(int(v) for v in np.asarray(z).ravel())
    if len(z) != keys.dim:
        raise ValueError(f"query vector has dimension {len(z)}, keys have {keys.dim}")
    p = keys.params.p
    if any(v < 0 or v >= p for v in z):
        raise ValueError("query vector components must lie in Z_p")
    return FunctionalKey(sum(si * zi for si, zi in zip(keys.s, z)) % p, z)


@lru_cache(maxsize=32)
def _baby_table(g: int, q: int, m: int) -> dict[int, int]:
    table: dict[int, int] = {}
    cur = 1
    for j in range(m):
        table.setdefault(cur, j)
        cur = cur * g % q
    return table


def dlog_bsgs(g: int, y: int, q: int, bound: int) -> int:
    """Smallest x in [0, bound] with g^x = y (mod q), by baby-step giant-step."""
    m = math.isqrt(bound) + 1
    table = _baby_table(g, q, m)
    giant = pow(g, -m, q)
    cur = y % q
    for i in range(m + 1):
        j = table.get(cur)
        if j is not None:
            x = i * m + j
            if x <= bound:
                return x
            break
        cur = cur * giant % q
    raise LogNotFound(f"no discrete log in [0, {bound}]")


def dlog_linear(g: int, y: int, q: int, bound: int) -> int:
    cur = 1
    for x in range(bound + 1):
        if cur == y % q:
            return x
        cur = cur * g % q
    raise LogNotFound(f"no discrete log in [0, {bound}]")


def decrypt_inner_product(params: GroupParams, ct: Ciphertext, z: Sequence[int],
                          fkey: FunctionalKey, bound: int) -> int:
    """Recover <x, z> as log_g(prod ct_j^z_j / ct0^eta), searched over [0, bound]."""
    z = [int(v) for v in np.asarray(z).ravel()]
    if len(z) != len(ct.ct):
        raise ValueError(f"query vector has dimension {len(z)}, ciphertext {len(ct.ct)}")
    if bound < 0 or bound >= params.p:
        raise ValueError("bound must lie in [0, p)")
    q = params.q
    acc = 1
    for cj, zj in zip(ct.ct, z):
        if zj:
            acc = acc * pow(cj, zj, q) % q
    # ct0 lies in the order-p subgroup, so ct0^(p - eta) is its inverse power
    acc = acc * pow(ct.ct0, (params.p - fkey.eta) % params.p, q) % q
    return dlog_bsgs(params.g, acc, q, bound)


def inner_product_bound(dim: int, k: int, xmax: int) -> int:
    """Largest possible <x, z> for x in [0, xmax]^dim and k-bit query weights."""
    return dim * ((1 << k) - 1) * xmax


# ---------------------------------------------------------------------------
# Batch path: many ciphertexts against many query vectors at once.

def _elem_dtype(q: int):
    return np.uint64 if q.bit_length() <= _VECTOR_MAX_BITS else object


def _mulmod(a: np.ndarray, b: np.ndarray, q: int) -> np.ndarray:
    """Elementwise a*b mod q for reduced operands."""
    if a.dtype == object:
        return (a * b) % q
    qq = np.uint64(q)
    bits = q.bit_length()
    # limbs of b small enough that a * limb and r << limb both stay below 2^64
    limb = 64 - bits
    mask = np.uint64((1 << limb) - 1)
    r = np.zeros(np.broadcast(a, b).shape, dtype=np.uint64)
    for shift in range(limb * ((bits - 1) // limb), -1, -limb):
        chunk = (b >> np.uint64(shift)) & mask
        r = ((r << np.uint64(limb)) % qq + (a * chunk) % qq) % qq
    return r


def _prod_mod(a: np.ndarray, q: int) -> np.ndarray:
    """Product mod q along the last axis, by pairwise tree reduction."""
    while a.shape[-1] > 1:
        if a.shape[-1] % 2:
            pad = np.ones(a.shape[:-1] + (1,), dtype=a.dtype)
            a = np.concatenate([a, pad], axis=-1)
        a = _mulmod(a[..., 0::2], a[..., 1::2], q)
    return a[..., 0]


def _powmod(base: np.ndarray, exp: np.ndarray, q: int) -> np.ndarray:
    """Elementwise base ** exp mod q by square-and-multiply."""
    out = np.ones_like(base)
    exp = exp.astype(np.uint64)
    for bit in range(int(exp.max()).bit_length() if exp.size else 0):
        sel = (exp >> np.uint64(bit)) & np.uint64(1) == 1
        if sel.any():
            out[sel] = _mulmod(out[sel], base[sel], q)
        base = _mulmod(base, base, q)
    return out


@dataclass(frozen=True)
class CiphertextBatch:
    """n ciphertexts of dimension D stored column-wise."""

    ct0: np.ndarray  # shape (n,)
    ct: np.ndarray   # shape (n, D)

    def __len__(self) -> int:
        return len(self.ct0)

    @property
    def dim(self) -> int:
        return self.ct.shape[1]

    def __getitem__(self, i: int) -> Ciphertext:
        return Ciphertext(int(self.ct0[i]), tuple(int(v) for v in self.ct[i]))

    def take(self, idx) -> CiphertextBatch:
        return CiphertextBatch(self.ct0[idx], self.ct[idx])

    @classmethod
    def from_list(cls, cts: Sequence[Ciphertext], q: int) -> CiphertextBatch:
        dt = _elem_dtype(q)
        ct0 = np.array([c.ct0 for c in cts], dtype=dt)
        ct = np.array([c.ct for c in cts], dtype=dt).reshape(len(cts), -1)
        return cls(ct0, ct)

    def to_list(self) -> list[Ciphertext]:
        return [self[i] for i in range(len(self))]

    def encode(self, w: Writer) -> None:
        w.count(len(self)).count(self.dim)
        for v in self.ct0:
            w.int(int(v))
        for v in self.ct.ravel():
            w.int(int(v))

    @classmethod
    def decode(cls, r: Reader, q: int) -> CiphertextBatch:
        n, d = r.count(), r.count()
        dt = _elem_dtype(q)
        ct0 = np.array([r.int() for _ in range(n)], dtype=dt)
        ct = np.array([r.int() for _ in range(n * d)], dtype=dt).reshape(n, d)
        return cls(ct0, ct)


def encrypt_batch(keys: MasterKeys, params: GroupParams, xt: np.ndarray, seed=None) -> CiphertextBatch:
    """Encrypt each row of xt with fresh randomness drawn from one seeded stream."""
    xt = np.asarray(xt, dtype=np.int64)
    if xt.ndim != 2 or xt.shape[1] != keys.dim:
        raise ValueError(f"expected an (n, {keys.dim}) plaintext matrix, got {xt.shape}")
    if xt.size and (xt.min() < 0 or xt.max() >= params.p):
        raise ValueError("plaintext components must lie in Z_p")
    rng = _rng(seed)
    q, g = params.q, params.g
    gpow = {int(v): pow(g, int(v), q) for v in np.unique(xt)}
    dt = _elem_dtype(q)
    ct0 = np.empty(len(xt), dtype=dt)
    ct = np.empty(xt.shape, dtype=dt)
    for n, row in enumerate(xt.tolist()):
        r = rng.randrange(params.p)
        ct0[n] = pow(g, r, q)
        ct[n] = [pow(hi, r, q) * gpow[xi] % q for hi, xi in zip(keys.h, row)]
    return CiphertextBatch(ct0, ct)


@lru_cache(maxsize=8)
def _sorted_baby_table(g: int, q: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    keys = np.empty(m, dtype=np.uint64)
    cur = 1
    for j in range(m):
        keys[j] = cur
        cur = cur * g % q
    order = np.argsort(keys, kind="stable")
    return keys[order], order.astype(np.int64)


def dlog_batch(params: GroupParams, y: np.ndarray, bound: int) -> np.ndarray:
    """Vectorized bounded discrete log; entries with no solution come back as -1."""
    y = np.asarray(y)
    flat = y.ravel()
    out = np.full(flat.shape, -1, dtype=np.int64)
    q, g = params.q, params.g
    if flat.dtype == object or q.bit_length() > _VECTOR_MAX_BITS:
        for i, v in enumerate(flat):
            try:
                out[i] = dlog_bsgs(g, int(v), q, bound)
            except LogNotFound:
                pass
        return out.reshape(y.shape)
    m = min(bound + 1, max(math.isqrt(bound) + 1, _BATCH_BABY_STEPS))
    keys, vals = _sorted_baby_table(g, q, m)
    giant = np.uint64(pow(g, -m, q))
    cur = flat.astype(np.uint64) % np.uint64(q)
    todo = np.arange(len(flat))
    for i in range(bound // m + 1):
        pos = np.searchsorted(keys, cur)
        pos[pos == len(keys)] = 0
        hit = keys[pos] == cur
        if hit.any():
            x = i * m + vals[pos[hit]]
            ok = x <= bound
            out[todo[hit][ok]] = x[ok]
            todo, cur = todo[~hit], cur[~hit]
            if not len(todo):
                break
        cur = _mulmod(cur, np.full_like(cur, giant), q)
    return out.reshape(y.shape)


def decrypt_batch(params: GroupParams, batch: CiphertextBatch, z: np.ndarray,
                  etas: Sequence[int], bound: int, chunk: int = 256) -> np.ndarray:
    """Inner products <x_n, z_i> for every ciphertext n and query row i -> (n, I) int64.

    Raises LogNotFound if any entry has no discrete log within the bound.
    """
    z = np.asarray(z, dtype=np.int64)
    if z.ndim != 2 or z.shape[1] != batch.dim:
        raise ValueError(f"query matrix must be (I, {batch.dim}), got {z.shape}")
    if len(etas) != len(z):
        raise ValueError("need one functional key per query vector")
    if bound < 0 or bound >= params.p:
        raise ValueError("bound must lie in [0, p)")
    q, p = params.q, params.p
    vector = batch.ct.dtype != object and z.size and z.min() >= 0 and z.max() < 256
    n_items, n_q = len(batch), len(z)
    group_elems = np.empty((n_items, n_q), dtype=batch.ct.dtype)
    for start in range(0, n_items, chunk):
        ct = batch.ct[start:start + chunk]
        ct0 = batch.ct0[start:start + chunk]
        if vector:
            # powers[w] = ct ** w for every weight value that occurs
            zmax = int(z.max())
            powers = np.empty((zmax + 1,) + ct.shape, dtype=np.uint64)
            powers[0] = 1
            for w in range(1, zmax + 1):
                powers[w] = _mulmod(powers[w - 1], ct, q)
            cols = np.arange(ct.shape[1])
            for i in range(n_q):
                group_elems[start:start + len(ct), i] = _prod_mod(powers[z[i], :, cols].T, q)
        else:
            for n in range(len(ct)):
                row = [int(v) for v in ct[n]]
                for i in range(n_q):
                    acc = 1
                    for cj, zj in zip(row, z[i].tolist()):
                        if zj:
                            acc = acc * pow(cj, zj, q) % q
                    group_elems[start + n, i] = acc
        if vector:
            exps = np.array([(p - int(e)) % p for e in etas], dtype=np.uint64)
            inv = _powmod(np.repeat(ct0[:, None], n_q, axis=1), np.broadcast_to(exps, (len(ct0), n_q)), q)
            group_elems[start:start + len(ct)] = _mulmod(group_elems[start:start + len(ct)], inv, q)
        else:
            for n, c0 in enumerate(ct0.tolist()):
                inv = [pow(int(c0), (p - int(e)) % p, q) for e in etas]
                group_elems[start + n] = _mulmod(group_elems[start + n],
                                                 np.array(inv, dtype=group_elems.dtype), q)
    logs = dlog_batch(params, group_elems, bound)
    missing = int((logs < 0).sum())
    if missing:
        raise LogNotFound(f"{missing} of {logs.size} inner products not found in [0, {bound}]")
    return logs
