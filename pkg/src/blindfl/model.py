"""Parameter containers, shape registries and the on-wire matrix record.

A model is an ordered list of parameter matrices indexed 1..M.  Values are
kept as float64 in memory and narrowed to float32 only when a matrix is
serialized, so that byte counts follow ``4 * count + 128``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from importlib import resources
from math import prod
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HEADER_SIZE = 128
BYTES_PER_VALUE = 4
MAX_NDIM = 8
MAX_NAME_BYTES = 64

MATRIX_MAGIC = b"BFLM"
MATRIX_VERSION = 1
FLAG_ENCRYPTED = 0x01

ROLES = ("weight", "bias")

# magic, version, role, ndim, flags, index, count, t, 8 dims, name
_HEADER = struct.Struct("<4sBBBBIQQ8I64s")
assert _HEADER.size + 4 == HEADER_SIZE


class ShapeError(ValueError):
    """Raised when values, shapes or manifests disagree."""


class RecordError(ValueError):
    """Raised when a serialized matrix record is malformed."""


@dataclass(frozen=True, eq=False)
class ParamMatrix:
    index: int
    shape: tuple[int, ...]
    values: np.ndarray
    role: str = "weight"
    name: str = ""

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if any(d <= 0 for d in shape):
            raise ShapeError(f"non-positive dimension in shape {shape}")
        if prod(shape) != values.size:
            raise ShapeError(f"shape {shape} does not hold {values.size} values")
        if self.role not in ROLES:
            raise ShapeError(f"unknown role {self.role!r}")
        if self.index < 1:
            raise ShapeError("matrix indices are 1-based")
        values.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def array(self) -> np.ndarray:
        """Writable copy of the values in their natural shape."""
        return self.values.reshape(self.shape).copy()

    def with_values(self, values) -> "ParamMatrix":
        return ParamMatrix(self.index, self.shape, values, self.role, self.name)

    def __eq__(self, other):
        if not isinstance(other, ParamMatrix):
            return NotImplemented
        return (
            self.index == other.index
            and self.shape == other.shape
            and self.role == other.role
            and self.name == other.name
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.index, self.shape, self.role, self.name, self.values.tobytes()))


@dataclass(frozen=True)
class ModelParams:
    matrices: tuple[ParamMatrix, ...]

    def __post_init__(self):
        matrices = tuple(self.matrices)
        if not matrices:
            raise ShapeError("a model needs at least one parameter matrix")
        for pos, m in enumerate(matrices, start=1):
            if m.index != pos:
                raise ShapeError(f"matrix at position {pos} carries index {m.index}")
        object.__setattr__(self, "matrices", matrices)

    @classmethod
    def from_arrays(
        cls,
        arrays: Sequence,
        roles: Sequence[str] | None = None,
        names: Sequence[str] | None = None,
    ) -> "ModelParams":
        mats = []
        for j, a in enumerate(arrays, start=1):
            a = np.asarray(a, dtype=np.float64)
            role = roles[j - 1] if roles else ("bias" if a.ndim == 1 else "weight")
            name = names[j - 1] if names else f"m{j}"
            mats.append(ParamMatrix(j, a.shape or (1,), a.reshape(-1), role, name))
        return cls(tuple(mats))

    def __len__(self):
        return len(self.matrices)

    def __iter__(self):
        return iter(self.matrices)

    def __getitem__(self, j: int) -> ParamMatrix:
        """1-based lookup."""
        if not 1 <= j <= len(self.matrices):
            raise IndexError(f"matrix index {j} outside 1..{len(self.matrices)}")
        return self.matrices[j - 1]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [m.shape for m in self.matrices]

    def compatible(self, other: "ModelParams") -> bool:
        return self.shapes == other.shapes

    def arrays(self) -> list[np.ndarray]:
        return [m.array() for m in self.matrices]

    def replace(self, arrays: Sequence) -> "ModelParams":
        if len(arrays) != len(self.matrices):
            raise ShapeError("replacement count differs from model size")
        return ModelParams(tuple(m.with_values(np.asarray(a).reshape(-1)) for m, a in zip(self.matrices, arrays)))


def serialized_size(m: ParamMatrix) -> int:
    return BYTES_PER_VALUE * m.size + HEADER_SIZE


def model_total_size(model: Iterable[ParamMatrix]) -> int:
    return sum(serialized_size(m) for m in model)


def flatten(model: ModelParams) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    data = np.concatenate([m.values for m in model.matrices])
    return data, model.shapes


def unflatten(
    data,
    manifest: Sequence[Sequence[int]],
    roles: Sequence[str] | None = None,
    names: Sequence[str] | None = None,
) -> ModelParams:
    data = np.asarray(data, dtype=np.float64).reshape(-1)
    sizes = [prod(s) for s in manifest]
    if not manifest or sum(sizes) != data.size:
        raise ShapeError(f"manifest describes {sum(sizes)} values, data has {data.size}")
    mats = []
    offset = 0
    for j, (shape, n) in enumerate(zip(manifest, sizes), start=1):
        role = roles[j - 1] if roles else ("bias" if len(shape) == 1 else "weight")
        name = names[j - 1] if names else f"m{j}"
        mats.append(ParamMatrix(j, tuple(shape), data[offset : offset + n], role, name))
        offset += n
    return ModelParams(tuple(mats))


# -- matrix record -----------------------------------------------------------


def pack_header(m: ParamMatrix, t: int = 0, encrypted: bool = False) -> bytes:
    if len(m.shape) > MAX_NDIM:
        raise RecordError(f"at most {MAX_NDIM} dimensions fit in a record header")
    name = m.name.encode("utf-8")
    if len(name) > MAX_NAME_BYTES:
        raise RecordError("matrix name too long for record header")
    dims = list(m.shape) + [0] * (MAX_NDIM - len(m.shape))
    body = _HEADER.pack(
        MATRIX_MAGIC,
        MATRIX_VERSION,
        ROLES.index(m.role),
        len(m.shape),
        FLAG_ENCRYPTED if encrypted else 0,
        m.index,
        m.size,
        t,
        *dims,
        name,
    )
    return body + struct.pack("<I", zlib.crc32(body))


@dataclass(frozen=True)
class RecordHeader:
    index: int
    shape: tuple[int, ...]
    role: str
    name: str
    count: int
    t: int
    encrypted: bool

    def empty_matrix(self, values=None) -> ParamMatrix:
        vals = np.zeros(self.count) if values is None else values
        return ParamMatrix(self.index, self.shape, vals, self.role, self.name)


def unpack_header(buf: bytes, offset: int = 0) -> RecordHeader:
    raw = bytes(buf[offset : offset + HEADER_SIZE])
    if len(raw) < HEADER_SIZE:
        raise RecordError("truncated matrix header")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise RecordError("matrix header checksum mismatch")
    magic, version, role, ndim, flags, index, count, t, *rest = _HEADER.unpack(body)
    if magic != MATRIX_MAGIC:
        raise RecordError(f"bad matrix magic {magic!r}")
    if version != MATRIX_VERSION:
        raise RecordError(f"unsupported matrix record version {version}")
    if role >= len(ROLES) or not 1 <= ndim <= MAX_NDIM:
        raise RecordError("corrupt matrix header fields")
    dims, name = rest[:MAX_NDIM], rest[MAX_NDIM]
    shape = tuple(dims[:ndim])
    if prod(shape) != count:
        raise RecordError("matrix header shape and count disagree")
    return RecordHeader(
        index=index,
        shape=shape,
        role=ROLES[role],
        name=name.rstrip(b"\0").decode("utf-8"),
        count=count,
        t=t,
        encrypted=bool(flags & FLAG_ENCRYPTED),
    )


def serialize_matrix(m: ParamMatrix, t: int = 0) -> bytes:
    """128-byte header followed by float32 little-endian values."""
    return pack_header(m, t) + m.values.astype("<f4").tobytes()


def deserialize_matrix(buf: bytes, offset: int = 0) -> tuple[ParamMatrix, int, int]:
    """Return ``(matrix, t, next_offset)``."""
    hdr = unpack_header(buf, offset)
    if hdr.encrypted:
        raise RecordError("record holds ciphertext, not plaintext values")
    start = offset + HEADER_SIZE
    end = start + BYTES_PER_VALUE * hdr.count
    if end > len(buf):
        raise RecordError("truncated matrix values")
    values = np.frombuffer(buf, dtype="<f4", count=hdr.count, offset=start).astype(np.float64)
    return hdr.empty_matrix(values), hdr.t, end


# -- shape registry ------------------------------------------------------------


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    shape: tuple[int, ...]
    role: str

    @property
    def params(self) -> int:
        return prod(self.shape)

    @property
    def nbytes(self) -> int:
        return BYTES_PER_VALUE * self.params + HEADER_SIZE


@dataclass(frozen=True)
class ModelShapeRegistry:
    name: str
    entries: tuple[RegistryEntry, ...] = field(default_factory=tuple)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_bytes(self) -> int:
        return sum(e.nbytes for e in self.entries)

    def __len__(self):
        return len(self.entries)

    def zeros(self) -> ModelParams:
        return ModelParams(
            tuple(
                ParamMatrix(j, e.shape, np.zeros(e.params), e.role, e.name)
                for j, e in enumerate(self.entries, start=1)
            )
        )

    def random(self, rng: np.random.Generator, low=-1.0, high=1.0) -> ModelParams:
        return ModelParams(
            tuple(
                ParamMatrix(j, e.shape, rng.uniform(low, high, e.params), e.role, e.name)
                for j, e in enumerate(self.entries, start=1)
            )
        )


def parse_registry(text: str, name: str = "model") -> ModelShapeRegistry:
    """Parse rows of ``name  shape  role`` where shape is ``AxBxC``.

    Blank lines and ``#`` comments are skipped.
    """
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise ShapeError(f"line {lineno}: expected 'name shape role', got {line!r}")
        lname, shape_s, role = parts
        try:
            shape = tuple(int(d) for d in shape_s.lower().split("x"))
        except ValueError:
            raise ShapeError(f"line {lineno}: bad shape {shape_s!r}") from None
        if any(d <= 0 for d in shape) or role not in ROLES:
            raise ShapeError(f"line {lineno}: invalid shape or role")
        entries.append(RegistryEntry(lname, shape, role))
    return ModelShapeRegistry(name, tuple(entries))


def load_registry(path: str | Path) -> ModelShapeRegistry:
    p = Path(path)
    return parse_registry(p.read_text(), p.stem)


def lenet5_registry() -> ModelShapeRegistry:
    text = resources.files("blindfl.data").joinpath("lenet5.txt").read_text()
    return parse_registry(text, "lenet5")
