"""Wire frames and message payloads.

Frame layout (little endian)::

    "BFL1" | kind u8 | round u64 | sender u32 | payload length u64 | payload | crc32

The checksum covers everything before it.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import fhe
from ..fhe import EncryptedMatrix, FheParams
from ..model import (
    BYTES_PER_VALUE,
    HEADER_SIZE,
    ModelParams,
    ParamMatrix,
    RecordError,
    deserialize_matrix,
    pack_header,
    serialize_matrix,
    unpack_header,
)

FRAME_MAGIC = b"BFL1"
_FRAME_HEAD = struct.Struct("<4sBQIQ")
FRAME_OVERHEAD = _FRAME_HEAD.size + 4
DEFAULT_FRAME_CAP = 64 * 2**20


class Kind(enum.IntEnum):
    PUBLIC_KEY = 1
    REQUEST_ROW = 2
    CLIENT_UPDATE = 3
    AGGREGATION_COMPLETE = 4
    PRIVATE_KEY = 5
    GLOBAL_MODEL = 6


class CodecError(ValueError):
    pass


class FrameCapExceeded(CodecError):
    pass


class MalformedFrame(CodecError):
    pass


class UnknownKind(MalformedFrame):
    pass


class RoundMismatchError(CodecError):
    pass


@dataclass(frozen=True)
class WireMessage:
    kind: Kind
    round_id: int
    sender: int
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "payload", bytes(self.payload))
        if not 0 <= self.round_id < 2**64 or not 0 <= self.sender < 2**32:
            raise CodecError("round id or sender out of range")

    @property
    def frame_length(self) -> int:
        return FRAME_OVERHEAD + len(self.payload)


def encode_message(msg: WireMessage, cap: int = DEFAULT_FRAME_CAP) -> bytes:
    if msg.frame_length > cap:
        raise FrameCapExceeded(f"frame of {msg.frame_length} bytes exceeds cap {cap}")
    head = _FRAME_HEAD.pack(FRAME_MAGIC, int(msg.kind), msg.round_id, msg.sender, len(msg.payload))
    body = head + msg.payload
    return body + struct.pack("<I", zlib.crc32(body))


def frame_length(buf, offset: int = 0) -> int:
    """Total length of the frame starting at ``offset`` (header must be present)."""
    if len(buf) - offset < _FRAME_HEAD.size:
        raise MalformedFrame("truncated frame header")
    magic, _, _, _, size = _FRAME_HEAD.unpack_from(buf, offset)
    if magic != FRAME_MAGIC:
        raise MalformedFrame(f"bad frame magic {bytes(magic)!r}")
    return FRAME_OVERHEAD + size


def decode_message(buf, cap: int = DEFAULT_FRAME_CAP, expected_round: int | None = None) -> WireMessage:
    buf = bytes(buf)
    total = frame_length(buf)
    if total > cap:
        raise FrameCapExceeded(f"frame of {total} bytes exceeds cap {cap}")
    if len(buf) != total:
        raise MalformedFrame(f"frame declares {total} bytes, got {len(buf)}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise MalformedFrame("frame checksum mismatch")
    _, kind, round_id, sender, size = _FRAME_HEAD.unpack_from(body)
    try:
        kind = Kind(kind)
    except ValueError:
        raise UnknownKind(f"unknown message kind {kind}") from None
    if expected_round is not None and round_id != expected_round:
        raise RoundMismatchError(f"frame for round {round_id} while in round {expected_round}")
    return WireMessage(kind, round_id, sender, body[_FRAME_HEAD.size :])


# -- payloads -----------------------------------------------------------------------


def encode_request_row(row: Sequence[int]) -> bytes:
    row = np.asarray(row, dtype=np.uint8)
    return struct.pack("<I", row.size) + np.packbits(row, bitorder="little").tobytes()


def decode_request_row(payload: bytes) -> np.ndarray:
    if len(payload) < 4:
        raise MalformedFrame("truncated request row")
    (M,) = struct.unpack_from("<I", payload)
    bits = np.frombuffer(payload, dtype=np.uint8, offset=4)
    if bits.size != -(-M // 8):
        raise MalformedFrame(f"request row for M={M} has {bits.size} bytes of bits")
    row = np.unpackbits(bits, bitorder="little")[:M]
    if np.unpackbits(bits, bitorder="little")[M:].any():
        raise MalformedFrame("request row has stray padding bits")
    return row.astype(np.int8)


def encode_client_list(clients: Sequence[int]) -> bytes:
    return struct.pack(f"<I{len(clients)}I", len(clients), *clients)


def decode_client_list(payload: bytes) -> list[int]:
    if len(payload) < 4:
        raise MalformedFrame("truncated client list")
    (n,) = struct.unpack_from("<I", payload)
    if len(payload) != 4 + 4 * n:
        raise MalformedFrame("client list length mismatch")
    return list(struct.unpack_from(f"<{n}I", payload, 4))


def encode_plain_matrices(matrices: Sequence[ParamMatrix], t: int = 0) -> bytes:
    """Concatenated plaintext records; the length is the sum of their serialized sizes."""
    return b"".join(serialize_matrix(m, t) for m in matrices)


class _Shape:
    """Header view of an encrypted matrix."""

    def __init__(self, em: EncryptedMatrix):
        self.index, self.shape, self.role, self.name, self.size = em.index, em.shape, em.role, em.name, em.count


def encode_encrypted_matrices(matrices: Sequence[EncryptedMatrix], t: int = 0) -> bytes:
    parts = []
    for em in matrices:
        parts.append(pack_header(_Shape(em), t, encrypted=True))
        parts.append(struct.pack("<I", len(em.chunks)))
        parts.extend(fhe.serialize_ciphertext(ct) for ct in em.chunks)
    return b"".join(parts)


@dataclass(frozen=True)
class DecodedMatrices:
    matrices: tuple
    t: int
    encrypted: bool


def decode_matrices(payload: bytes, params: FheParams | None = None) -> DecodedMatrices:
    """Inverse of both matrix encoders; all records must agree on t and type."""
    out, ts, kinds = [], set(), set()
    off = 0
    try:
        while off < len(payload):
            hdr = unpack_header(payload, off)
            ts.add(hdr.t)
            kinds.add(hdr.encrypted)
            if not hdr.encrypted:
                m, _, off = deserialize_matrix(payload, off)
                out.append(m)
                continue
            if params is None:
                raise MalformedFrame("ciphertext records need parameters to decode")
            off += HEADER_SIZE
            if off + 4 > len(payload):
                raise MalformedFrame("truncated chunk count")
            (count,) = struct.unpack_from("<I", payload, off)
            off += 4
            chunks = []
            for _ in range(count):
                ct, off = fhe.deserialize_ciphertext(payload, off, params)
                chunks.append(ct)
            if not chunks:
                raise MalformedFrame("encrypted matrix without chunks")
            out.append(EncryptedMatrix(hdr.index, hdr.shape, hdr.role, hdr.name, tuple(chunks)))
    except (RecordError, fhe.SerializationError) as exc:
        raise MalformedFrame(str(exc)) from exc
    if len(ts) > 1 or len(kinds) > 1:
        raise MalformedFrame("records disagree on t or encryption")
    return DecodedMatrices(tuple(out), ts.pop() if ts else 0, kinds.pop() if kinds else False)


def plain_payload_size(model: ModelParams, indices: Sequence[int]) -> int:
    return sum(HEADER_SIZE + BYTES_PER_VALUE * model[j].size for j in indices)
