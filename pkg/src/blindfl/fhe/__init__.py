"""Homomorphic backends behind one contract.

``oracle`` computes exactly (rational slots, zero noise); ``ckks`` is a
native leveled CKKS implementation.  Both track levels, scale and round tags
identically, so any pipeline can be run against either and compared.
"""

from __future__ import annotations

import math

import numpy as np

from ..model import ParamMatrix
from . import ckks, oracle
from .container import (
    ChecksumError,
    Ciphertext,
    EncryptedMatrix,
    FheKeyPair,
    PublicKey,
    SecretKey,
    SerializationError,
    TruncationError,
    VersionError,
    ciphertext_length,
    deserialize_ciphertext,
    deserialize_public_key,
    deserialize_secret_key,
    key_fingerprint,
    serialize_ciphertext,
    serialize_public_key,
    serialize_secret_key,
)
from .params import VALUE_BOUND, FheError, FheParams, ParamError, desk_profile, production_profile

__all__ = [
    "ChecksumError", "Ciphertext", "EncryptedMatrix", "FheError", "FheKeyPair", "FheParams",
    "KeyRoundError", "LevelError", "MismatchError", "CapacityError", "BoundError", "ParamError",
    "PublicKey", "SecretKey", "SerializationError", "TruncationError", "VersionError",
    "VALUE_BOUND", "add", "ciphertext_length", "decrypt_matrix", "decrypt_vector",
    "deserialize_ciphertext", "deserialize_public_key", "deserialize_secret_key",
    "encrypt_matrix", "encrypt_vector", "keygen", "key_fingerprint", "mul_plain",
    "production_profile", "serialize_ciphertext", "serialize_public_key", "serialize_secret_key",
    "desk_profile",
]

_BACKENDS = {"oracle": oracle, "ckks": ckks}


class KeyRoundError(FheError):
    """Key or ciphertext belongs to a different round."""


class LevelError(FheError):
    """No modulus level left for a rescale."""


class MismatchError(FheError):
    """Operands disagree on scheme, level or scale."""


class CapacityError(FheError):
    pass


class BoundError(FheError):
    pass


def _backend(scheme: str):
    return _BACKENDS[scheme]


def _context(ct: Ciphertext) -> FheParams:
    if ct.params is None:
        raise FheError("ciphertext carries no parameter context; pass params when deserializing")
    return ct.params


def keygen(params: FheParams, rng: np.random.Generator, round_id: int) -> FheKeyPair:
    params.data_primes  # resolves the chain; raises ParamError when unsupported
    return _backend(params.scheme).keygen(params, rng, round_id)


def encrypt_vector(pk: PublicKey, values, rng: np.random.Generator | None = None) -> Ciphertext:
    params = pk.params
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size > params.slot_capacity:
        raise CapacityError(f"{values.size} values exceed slot capacity {params.slot_capacity}")
    if not np.all(np.isfinite(values)) or (values.size and np.max(np.abs(values)) > VALUE_BOUND):
        raise BoundError(f"values must be finite with magnitude <= {VALUE_BOUND:g}")
    rng = rng if rng is not None else np.random.default_rng()
    return _backend(params.scheme).encrypt(pk, values, rng)


def decrypt_vector(sk: SecretKey, ct: Ciphertext, length: int | None = None) -> np.ndarray:
    if sk.round_id != ct.round_id:
        raise KeyRoundError(f"key for round {sk.round_id} cannot open round {ct.round_id} ciphertext")
    if sk.params.scheme != ct.scheme:
        raise MismatchError("key and ciphertext use different schemes")
    out = _backend(ct.scheme).decrypt(sk, ct)
    return out if length is None else out[:length]


def add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    if a.round_id != b.round_id:
        raise KeyRoundError(f"cannot add ciphertexts from rounds {a.round_id} and {b.round_id}")
    if a.scheme != b.scheme or a.level != b.level or a.scale_bits != b.scale_bits:
        raise MismatchError("operands differ in scheme, level or scale")
    return _backend(a.scheme).add(a, b, _context(a))


def mul_plain(ct: Ciphertext, plain) -> Ciphertext:
    """Multiply by a plaintext scalar or vector, then rescale (one level)."""
    if ct.level < 1:
        raise LevelError("ciphertext has no level left for a plaintext multiplication")
    params = _context(ct)
    if np.ndim(plain) != 0 and np.size(plain) > params.slot_capacity:
        raise CapacityError("plaintext longer than slot capacity")
    return _backend(ct.scheme).mul_plain(ct, plain, params)


def chunk_count(size: int, params: FheParams) -> int:
    return max(1, math.ceil(size / params.slot_capacity))


def encrypt_matrix(pk: PublicKey, m: ParamMatrix, rng: np.random.Generator | None = None) -> EncryptedMatrix:
    """Encrypt in slot-capacity slices; the last slice is zero padded."""
    cap = pk.params.slot_capacity
    count = chunk_count(m.size, pk.params)
    chunks = tuple(
        encrypt_vector(pk, m.values[k * cap : (k + 1) * cap], rng).with_chunk(k, count) for k in range(count)
    )
    return EncryptedMatrix(m.index, m.shape, m.role, m.name, chunks)


def decrypt_matrix(sk: SecretKey, em: EncryptedMatrix) -> ParamMatrix:
    if len(em.chunks) != em.chunks[0].chunk_count:
        raise MismatchError("encrypted matrix is missing chunks")
    parts = [decrypt_vector(sk, ct) for ct in sorted(em.chunks, key=lambda c: c.chunk_index)]
    values = np.concatenate(parts)[: em.count]
    return ParamMatrix(em.index, em.shape, values, em.role, em.name)
