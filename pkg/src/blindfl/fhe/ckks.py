"""Leveled CKKS over an RNS modulus chain.

Only what secure aggregation needs: public-key encryption, addition and
plaintext multiplication with rescaling.  A plaintext multiplier is encoded
at the scale of the prime about to be dropped, so every rescale returns the
ciphertext to exactly the context scale.
"""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache

import numpy as np

from . import ring
from .container import Ciphertext, FheKeyPair, PublicKey, SecretKey
from .params import FheParams

ERROR_STDDEV = 3.2


@lru_cache(maxsize=None)
def _embedding(n: int):
    """Slot positions and twists for the canonical embedding of degree n."""
    slots = n // 2
    rot = np.ones(slots, dtype=np.int64)
    for j in range(1, slots):
        rot[j] = rot[j - 1] * 5 % (2 * n)
    pos = (rot - 1) // 2
    conj_pos = (2 * n - rot - 1) // 2
    zeta = np.exp(1j * np.pi * np.arange(n) / n)
    return pos, conj_pos, zeta


def encode(values, n: int, scale: float) -> np.ndarray:
    """Round ``scale * values`` into integer polynomial coefficients."""
    pos, conj_pos, zeta = _embedding(n)
    z = np.zeros(n // 2, dtype=np.complex128)
    z[: len(values)] = values
    v = np.zeros(n, dtype=np.complex128)
    v[pos] = z
    v[conj_pos] = np.conj(z)
    coeffs = (np.fft.fft(v) / n * np.conj(zeta)).real
    return np.rint(coeffs * scale).astype(np.int64)


def decode(coeffs, n: int, scale: float) -> np.ndarray:
    pos, _, zeta = _embedding(n)
    v = np.fft.ifft(np.asarray(coeffs, dtype=np.float64) * zeta) * n
    return v[pos].real / scale


def _ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, size=n).astype(np.int64)


def _gaussian(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.rint(rng.normal(0.0, ERROR_STDDEV, size=n)).astype(np.int64)


def _ring(params: FheParams) -> ring.RnsRing:
    return ring.ring_for(params.ring_dim, params.data_primes)


def keygen(params: FheParams, rng: np.random.Generator, round_id: int) -> FheKeyPair:
    rr = _ring(params)
    n, q = params.ring_dim, rr.q
    s = _ternary(rng, n)
    a_hat = np.stack([rng.integers(0, p, size=n, dtype=np.int64) for p in rr.primes])
    s_hat = rr.forward(ring.reduce(s, rr.primes))
    e_hat = rr.forward(ring.reduce(_gaussian(rng, n), rr.primes))
    b_hat = ring.submod(e_hat, rr.pointwise(a_hat, s_hat), q)
    return FheKeyPair(PublicKey(params, round_id, (b_hat, a_hat)), SecretKey(params, round_id, s))


def encrypt(pk: PublicKey, values: np.ndarray, rng: np.random.Generator) -> Ciphertext:
    params = pk.params
    rr = _ring(params)
    n, q = params.ring_dim, rr.q
    b_hat, a_hat = pk.data
    m = encode(values, n, params.scale)
    u_hat = rr.forward(ring.reduce(_ternary(rng, n), rr.primes))
    c0 = rr.inverse(rr.pointwise(u_hat, b_hat))
    c1 = rr.inverse(rr.pointwise(u_hat, a_hat))
    c0 = ring.addmod(c0, ring.reduce(_gaussian(rng, n) + m, rr.primes), q)
    c1 = ring.addmod(c1, ring.reduce(_gaussian(rng, n), rr.primes), q)
    return Ciphertext("ckks", pk.round_id, params.levels, params.scale_bits, (c0, c1), params=params)


def decrypt(sk: SecretKey, ct: Ciphertext) -> np.ndarray:
    params = sk.params
    rr = _ring(params)
    c0, c1 = ct.payload
    # the message is far below q0 / 2, so the base residue alone determines it
    s0 = ring.reduce(sk.data, rr.primes[:1])
    m = ring.addmod(c0[:1], rr.multiply(c1[:1], s0, rows=slice(0, 1)), rr.q[:1])
    coeffs = ring.center(m[0], rr.primes[0])
    return decode(coeffs, params.ring_dim, float(2**ct.scale_bits))


def add(a: Ciphertext, b: Ciphertext, params: FheParams) -> Ciphertext:
    q = _ring(params).q[: a.level + 1]
    c0 = ring.addmod(a.payload[0], b.payload[0], q)
    c1 = ring.addmod(a.payload[1], b.payload[1], q)
    return Ciphertext("ckks", a.round_id, a.level, a.scale_bits, (c0, c1), a.chunk_index, a.chunk_count, params)


def _rescale(poly: np.ndarray, primes) -> np.ndarray:
    """Divide by the last prime and drop its residue row."""
    top = len(primes) - 1
    q_top = primes[top]
    last = ring.center(poly[top], q_top)
    out = np.empty((top, poly.shape[1]), dtype=np.int64)
    for i in range(top):
        qi = primes[i]
        diff = np.mod(poly[i] - np.mod(last, qi), qi)
        out[i] = ring.mulmod(diff, pow(q_top, -1, qi), qi)
    return out


def mul_plain(ct: Ciphertext, plain, params: FheParams) -> Ciphertext:
    rr = _ring(params)
    level = ct.level
    primes = rr.primes[: level + 1]
    q = rr.q[: level + 1]
    q_drop = primes[level]
    c0, c1 = ct.payload
    if np.ndim(plain) == 0:
        k = round(Fraction(plain) * q_drop)
        kres = np.array([[k % p] for p in primes], dtype=np.int64)
        c0 = ring.mulmod(c0, kres, q)
        c1 = ring.mulmod(c1, kres, q)
    else:
        pt = ring.reduce(encode(np.asarray(plain, dtype=np.float64), params.ring_dim, float(q_drop)), primes)
        rows = slice(0, level + 1)
        p_hat = rr.forward(pt, rows)
        c0 = rr.inverse(rr.pointwise(rr.forward(c0, rows), p_hat, rows), rows)
        c1 = rr.inverse(rr.pointwise(rr.forward(c1, rows), p_hat, rows), rows)
    payload = (_rescale(c0, primes), _rescale(c1, primes))
    return Ciphertext("ckks", ct.round_id, level - 1, ct.scale_bits, payload, ct.chunk_index, ct.chunk_count, params)
