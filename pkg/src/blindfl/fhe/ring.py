"""RNS arithmetic in Z_q[X]/(X^n + 1) for primes up to 61 bits.

Residue polynomials are int64 arrays of shape ``(L, n)`` holding values in
``[0, q_i)``, one row per prime.  Products of two residues need 122 bits, so
:func:`mulmod` estimates the quotient in 80-bit extended precision and fixes
the remainder with wrapping 64-bit arithmetic.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

_EXTENDED = np.finfo(np.longdouble).nmant >= 63


# below this a float64 quotient estimate is off by at most one
_DOUBLE_SAFE = 1 << 50


def _mulmod_rows(a, b, q, ftype):
    quot = np.floor(a.astype(ftype) * b.astype(ftype) * (ftype(1) / q.astype(ftype))).astype(np.int64)
    r = a.astype(np.uint64) * b.astype(np.uint64) - quot.astype(np.uint64) * q.astype(np.uint64)
    return np.mod(r.astype(np.int64), q)


def mulmod(a, b, q):
    """Elementwise ``a * b mod q`` for operands already reduced into [0, q).

    ``q`` may vary along the leading axis (one prime per residue row).
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    q = np.asarray(q, dtype=np.int64)
    big = q >= _DOUBLE_SAFE
    if not big.any():
        return _mulmod_rows(a, b, q, np.float64)
    if not _EXTENDED:
        return (a.astype(object) * b.astype(object) % q.astype(object)).astype(np.int64)
    if big.all() or q.ndim == 0:
        return _mulmod_rows(a, b, q, np.longdouble)
    a, b, q = np.broadcast_arrays(a, b, q)
    out = np.empty(a.shape, dtype=np.int64)
    for i in range(a.shape[0]):
        ftype = np.longdouble if q[i].flat[0] >= _DOUBLE_SAFE else np.float64
        out[i] = _mulmod_rows(a[i], b[i], q[i], ftype)
    return out


def addmod(a, b, q):
    s = a + b
    return np.where(s >= q, s - q, s)


def submod(a, b, q):
    d = a - b
    return np.where(d < 0, d + q, d)


def reduce(x, primes) -> np.ndarray:
    """Residues of an integer polynomial (int64 coefficients) under each prime."""
    x = np.asarray(x, dtype=np.int64)
    q = np.asarray(primes, dtype=np.int64)[:, None]
    return np.mod(x[None, :], q)


def center(x, q):
    """Map residues in [0, q) to the symmetric range (-q/2, q/2]."""
    return np.where(x > q // 2, x - q, x)


def _primitive_root(q: int, order: int) -> int:
    # q - 1 is divisible by order; g^((q-1)/order) has exact order iff its
    # (order/2)-th power is -1 (order is a power of two).
    for g in range(2, 1 << 16):
        w = pow(g, (q - 1) // order, q)
        if pow(w, order // 2, q) == q - 1:
            return w
    raise ValueError(f"no primitive {order}-th root modulo {q}")


class NttTables:
    """Precomputed twists and per-stage twiddles for one prime and degree."""

    def __init__(self, q: int, n: int):
        self.q = q
        self.n = n
        psi = _primitive_root(q, 2 * n)
        psi_inv = pow(psi, -1, q)
        n_inv = pow(n, -1, q)
        self.psi_pows = _powers(psi, n, q)
        self.psi_inv_pows = np.array(
            [v * n_inv % q for v in _powers(psi_inv, n, q).tolist()], dtype=np.int64
        )
        omega = psi * psi % q
        omega_inv = pow(omega, -1, q)
        self.fwd = _stage_twiddles(omega, n, q)
        self.inv = _stage_twiddles(omega_inv, n, q)


def _powers(base: int, count: int, q: int) -> np.ndarray:
    out = [1] * count
    for i in range(1, count):
        out[i] = out[i - 1] * base % q
    return np.array(out, dtype=np.int64)


def _stage_twiddles(omega: int, n: int, q: int) -> list[np.ndarray]:
    stages = []
    m = 1
    while m < n:
        step = pow(omega, n // (2 * m), q)
        stages.append(_powers(step, m, q))
        m *= 2
    return stages


@lru_cache(maxsize=None)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


class RnsRing:
    """Negacyclic NTT multiplication over a fixed list of primes."""

    def __init__(self, n: int, primes):
        self.n = n
        self.primes = tuple(int(p) for p in primes)
        self.tables = [_tables(p, n) for p in self.primes]
        self.q = np.array(self.primes, dtype=np.int64)[:, None]
        self._psi = np.stack([t.psi_pows for t in self.tables])
        self._psi_inv = np.stack([t.psi_inv_pows for t in self.tables])
        depth = len(self.tables[0].fwd)
        self._fwd = [np.stack([t.fwd[s] for t in self.tables]) for s in range(depth)]
        self._inv = [np.stack([t.inv[s] for t in self.tables]) for s in range(depth)]

    def _cyclic(self, a: np.ndarray, stages, rows) -> np.ndarray:
        n = self.n
        L = a.shape[0]
        q3 = self.q[rows][:, :, None]
        a = a[:, _bitrev(n)]
        m = 1
        for tw in stages:
            blocks = a.reshape(L, n // (2 * m), 2, m)
            u = blocks[:, :, 0, :]
            v = mulmod(blocks[:, :, 1, :], tw[rows][:, None, :], q3)
            a = np.stack([addmod(u, v, q3), submod(u, v, q3)], axis=2).reshape(L, n)
            m *= 2
        return a

    def forward(self, a: np.ndarray, rows=None) -> np.ndarray:
        rows = slice(0, a.shape[0]) if rows is None else rows
        a = mulmod(a, self._psi[rows], self.q[rows])
        return self._cyclic(a, self._fwd, rows)

    def inverse(self, a: np.ndarray, rows=None) -> np.ndarray:
        rows = slice(0, a.shape[0]) if rows is None else rows
        a = self._cyclic(a, self._inv, rows)
        return mulmod(a, self._psi_inv[rows], self.q[rows])

    def pointwise(self, a, b, rows=None) -> np.ndarray:
        rows = slice(0, a.shape[0]) if rows is None else rows
        return mulmod(a, b, self.q[rows])

    def multiply(self, a, b, rows=None) -> np.ndarray:
        """Negacyclic product of two coefficient-domain residue polynomials."""
        return self.inverse(self.pointwise(self.forward(a, rows), self.forward(b, rows), rows), rows)


@lru_cache(maxsize=None)
def _tables(q: int, n: int) -> NttTables:
    return NttTables(q, n)


@lru_cache(maxsize=None)
def ring_for(n: int, primes: tuple[int, ...]) -> RnsRing:
    return RnsRing(n, primes)
