"""Exact reference backend.

Slots hold rationals, so sums and plaintext products carry no rounding at
all; decryption rounds once to the nearest double.  Keys carry no material,
only the round tag and parameters.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .container import Ciphertext, FheKeyPair, PublicKey, SecretKey
from .params import FheParams


def _exact(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype == object:
        return arr
    return np.array([Fraction(v) for v in arr.tolist()], dtype=object)


def keygen(params: FheParams, rng, round_id: int) -> FheKeyPair:
    return FheKeyPair(PublicKey(params, round_id), SecretKey(params, round_id))


def encrypt(pk: PublicKey, values: np.ndarray, rng=None) -> Ciphertext:
    params = pk.params
    slots = np.zeros(params.slot_capacity)
    slots[: len(values)] = values
    return Ciphertext("oracle", pk.round_id, params.levels, params.scale_bits, slots, params=params)


def decrypt(sk: SecretKey, ct: Ciphertext) -> np.ndarray:
    return np.array([float(v) for v in np.asarray(ct.payload).tolist()], dtype=np.float64)


def add(a: Ciphertext, b: Ciphertext, params: FheParams) -> Ciphertext:
    exact = _exact(a.payload) + _exact(b.payload)
    return Ciphertext("oracle", a.round_id, a.level, a.scale_bits, exact, a.chunk_index, a.chunk_count, params)


def mul_plain(ct: Ciphertext, plain, params: FheParams) -> Ciphertext:
    if np.ndim(plain) == 0:
        factor = Fraction(plain)
        exact = _exact(ct.payload) * factor
    else:
        factors = np.zeros(params.slot_capacity, dtype=object)
        factors[:] = Fraction(0)
        plain = np.asarray(plain, dtype=np.float64)
        factors[: plain.size] = [Fraction(v) for v in plain.tolist()]
        exact = _exact(ct.payload) * factors
    return Ciphertext("oracle", ct.round_id, ct.level - 1, ct.scale_bits, exact, ct.chunk_index, ct.chunk_count, params)
