"""Ciphertext, key and encrypted-matrix containers plus their byte formats.

Ciphertext container layout (little-endian)::

    "BFHE" | version u8 | scheme u8 | round u64 | level u8 | chunk index u32
    | chunk count u32 | scale exponent u16 | payload length u64 | payload
    | crc32 u32

The CKKS payload is ``c0`` then ``c1``, each as ``level + 1`` residue rows
of ``ring_dim`` uint64 coefficients.  The oracle payload is the slot values
as float64.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .params import FheError, FheParams, ParamError, SCHEMES

CT_MAGIC = b"BFHE"
CT_VERSION = 1
_CT_HEADER = struct.Struct("<4sBBQBIIHQ")

PK_MAGIC = b"BFPK"
SK_MAGIC = b"BFSK"
KEY_VERSION = 1
_PARAMS = struct.Struct("<BBHBB")  # scheme, log2 n, scale bits, security, chain length
_KEY_HEADER = struct.Struct("<4sBQ")


class SerializationError(FheError):
    pass


class VersionError(SerializationError):
    pass


class TruncationError(SerializationError):
    pass


class ChecksumError(SerializationError):
    pass


@dataclass(frozen=True, eq=False)
class Ciphertext:
    scheme: str
    round_id: int
    level: int
    scale_bits: int
    payload: Any
    chunk_index: int = 0
    chunk_count: int = 1
    # context needed for arithmetic; never serialized
    params: FheParams | None = None

    def __post_init__(self):
        if self.level < 0:
            raise FheError("negative ciphertext level")
        if not 0 <= self.chunk_index < self.chunk_count:
            raise FheError("chunk index outside chunk count")

    def with_chunk(self, index: int, count: int) -> "Ciphertext":
        return replace(self, chunk_index=index, chunk_count=count)

    def __eq__(self, other):
        if not isinstance(other, Ciphertext):
            return NotImplemented
        return serialize_ciphertext(self) == serialize_ciphertext(other)

    __hash__ = None


@dataclass(frozen=True)
class PublicKey:
    params: FheParams
    round_id: int
    data: Any = None


@dataclass(frozen=True)
class SecretKey:
    params: FheParams
    round_id: int
    data: Any = None


@dataclass(frozen=True)
class FheKeyPair:
    public: PublicKey
    secret: SecretKey

    @property
    def round_id(self) -> int:
        return self.public.round_id

    @property
    def params(self) -> FheParams:
        return self.public.params


@dataclass(frozen=True)
class EncryptedMatrix:
    """Chunked ciphertexts standing in for one parameter matrix."""

    index: int
    shape: tuple[int, ...]
    role: str
    name: str
    chunks: tuple[Ciphertext, ...]

    @property
    def count(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def round_id(self) -> int:
        return self.chunks[0].round_id


# -- ciphertexts -----------------------------------------------------------------


def _payload_bytes(ct: Ciphertext) -> bytes:
    if ct.scheme == "ckks":
        c0, c1 = ct.payload
        return np.concatenate([c0, c1]).astype("<u8").tobytes()
    return np.asarray(ct.payload, dtype=np.float64).astype("<f8").tobytes()


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    payload = _payload_bytes(ct)
    head = _CT_HEADER.pack(
        CT_MAGIC,
        CT_VERSION,
        SCHEMES.index(ct.scheme),
        ct.round_id,
        ct.level,
        ct.chunk_index,
        ct.chunk_count,
        ct.scale_bits,
        len(payload),
    )
    body = head + payload
    return body + struct.pack("<I", zlib.crc32(body))


def ciphertext_length(buf, offset: int = 0) -> int:
    """Total container length announced by the header at ``offset``."""
    if len(buf) - offset < _CT_HEADER.size:
        raise TruncationError("truncated ciphertext header")
    plen = _CT_HEADER.unpack_from(buf, offset)[-1]
    return _CT_HEADER.size + plen + 4


def deserialize_ciphertext(buf, offset: int = 0, params: FheParams | None = None) -> tuple[Ciphertext, int]:
    """Parse one container; return it with the offset just past it.

    ``params`` re-attaches the arithmetic context, which is not on the wire.
    """
    buf = memoryview(buf)
    total = ciphertext_length(buf, offset)
    if len(buf) - offset < total:
        raise TruncationError("truncated ciphertext payload")
    magic, version, scheme, round_id, level, idx, count, scale_bits, plen = _CT_HEADER.unpack_from(buf, offset)
    if magic != CT_MAGIC:
        raise SerializationError(f"bad ciphertext magic {bytes(magic)!r}")
    if version != CT_VERSION:
        raise VersionError(f"unsupported ciphertext version {version}")
    end = offset + total
    (crc,) = struct.unpack_from("<I", buf, end - 4)
    if zlib.crc32(buf[offset : end - 4]) != crc:
        raise ChecksumError("ciphertext checksum mismatch")
    if scheme >= len(SCHEMES):
        raise SerializationError(f"unknown scheme tag {scheme}")
    start = offset + _CT_HEADER.size
    raw = bytes(buf[start : start + plen])
    if SCHEMES[scheme] == "ckks":
        rows = 2 * (level + 1)
        if plen % (8 * rows):
            raise SerializationError("ckks payload not a whole number of residues")
        arr = np.frombuffer(raw, dtype="<u8").astype(np.int64).reshape(rows, -1)
        payload = (arr[: level + 1].copy(), arr[level + 1 :].copy())
    else:
        if plen % 8:
            raise SerializationError("oracle payload not a whole number of slots")
        payload = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    try:
        ct = Ciphertext(SCHEMES[scheme], round_id, level, scale_bits, payload, idx, count, params)
    except FheError as exc:
        raise SerializationError(str(exc)) from None
    return ct, end


# -- keys ------------------------------------------------------------------------


def _pack_params(p: FheParams) -> bytes:
    head = _PARAMS.pack(
        SCHEMES.index(p.scheme),
        p.ring_dim.bit_length() - 1,
        p.scale_bits,
        0 if p.security == "production" else 1,
        len(p.chain_bits),
    )
    return head + bytes(p.chain_bits)


def _unpack_params(buf, offset: int) -> tuple[FheParams, int]:
    scheme, logn, scale_bits, sec, nchain = _PARAMS.unpack_from(buf, offset)
    offset += _PARAMS.size
    chain = tuple(bytes(buf[offset : offset + nchain]))
    try:
        params = FheParams(SCHEMES[scheme], 1 << logn, scale_bits, chain, ("production", "test")[sec])
    except (IndexError, ParamError) as exc:
        raise SerializationError(f"bad key parameters: {exc}") from None
    return params, offset + nchain


def _key_bytes(magic: bytes, params: FheParams, round_id: int, body: bytes) -> bytes:
    out = _KEY_HEADER.pack(magic, KEY_VERSION, round_id) + _pack_params(params) + body
    return out + struct.pack("<I", zlib.crc32(out))


def _key_parse(magic: bytes, buf) -> tuple[FheParams, int, bytes]:
    buf = memoryview(buf)
    if len(buf) < _KEY_HEADER.size + _PARAMS.size + 4:
        raise TruncationError("truncated key")
    if zlib.crc32(buf[:-4]) != struct.unpack_from("<I", buf, len(buf) - 4)[0]:
        raise ChecksumError("key checksum mismatch")
    got, version, round_id = _KEY_HEADER.unpack_from(buf, 0)
    if got != magic:
        raise SerializationError(f"expected {magic!r} key, got {bytes(got)!r}")
    if version != KEY_VERSION:
        raise VersionError(f"unsupported key version {version}")
    params, off = _unpack_params(buf, _KEY_HEADER.size)
    return params, round_id, bytes(buf[off:-4])


def serialize_public_key(pk: PublicKey) -> bytes:
    body = b""
    if pk.params.scheme == "ckks":
        b, a = pk.data
        body = np.concatenate([b, a]).astype("<u8").tobytes()
    return _key_bytes(PK_MAGIC, pk.params, pk.round_id, body)


def deserialize_public_key(buf) -> PublicKey:
    params, round_id, body = _key_parse(PK_MAGIC, buf)
    data = None
    if params.scheme == "ckks":
        rows = 2 * len(params.data_primes)
        arr = np.frombuffer(body, dtype="<u8").astype(np.int64)
        if arr.size != rows * params.ring_dim:
            raise SerializationError("public key size does not match its parameters")
        arr = arr.reshape(rows, params.ring_dim)
        data = (arr[: rows // 2].copy(), arr[rows // 2 :].copy())
    return PublicKey(params, round_id, data)


def serialize_secret_key(sk: SecretKey) -> bytes:
    body = b""
    if sk.params.scheme == "ckks":
        body = np.asarray(sk.data, dtype=np.int8).tobytes()
    return _key_bytes(SK_MAGIC, sk.params, sk.round_id, body)


def deserialize_secret_key(buf) -> SecretKey:
    params, round_id, body = _key_parse(SK_MAGIC, buf)
    data = None
    if params.scheme == "ckks":
        if len(body) != params.ring_dim:
            raise SerializationError("secret key size does not match its parameters")
        data = np.frombuffer(body, dtype=np.int8).astype(np.int64)
    return SecretKey(params, round_id, data)


def key_fingerprint(pk: PublicKey) -> bytes:
    return hashlib.sha256(serialize_public_key(pk)).digest()[:16]
