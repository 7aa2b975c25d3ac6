"""Embedding sets and the GLRE binary container.

GLRE v1 layout (all integers little-endian)::

    0   magic   b"GLRE"
    4   u32     version (1)
    8   u64     record count
    16  u32     dim
    20  u32     flags (bit 0: rows are L2-normalized)
    24  id table: per record, u16 byte length + UTF-8 bytes
        payload: count * dim float32, row-major, little-endian
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

__all__ = [
    "EmbeddingSet",
    "GLREError",
    "BadMagicError",
    "VersionMismatchError",
    "DuplicateIdError",
    "NonFiniteError",
    "TruncatedError",
    "ZeroNormError",
    "IdMismatchError",
    "save_embeddings",
    "load_embeddings",
    "write_glre",
    "read_glre",
    "l2_normalize",
    "align_by_ids",
]

MAGIC = b"GLRE"
VERSION = 1
HEADER = struct.Struct("<4sIQII")
FLAG_NORMALIZED = 1
MAX_ID_BYTES = 0xFFFF
NORM_TOL = 1e-5


class GLREError(ValueError):
    """Base class for malformed GLRE data and embedding-set invariant violations."""


class BadMagicError(GLREError):
    pass


class VersionMismatchError(GLREError):
    pass


class DuplicateIdError(GLREError):
    pass


class NonFiniteError(GLREError):
    pass


class TruncatedError(GLREError):
    pass


class ZeroNormError(GLREError):
    pass


class IdMismatchError(GLREError):
    pass


@dataclass(frozen=True)
class EmbeddingSet:
    """Immutable (ids, float32 matrix) pair.

    ``data`` is copied to a read-only C-contiguous float32 array on
    construction, so instances can be shared between threads.
    """

    ids: tuple[str, ...]
    data: np.ndarray
    normalized: bool = False
    _row: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(self.ids)
        data = np.array(self.data, dtype="<f4", order="C", copy=True)
        if data.ndim != 2:
            raise GLREError(f"data must be 2-D, got shape {data.shape}")
        if data.shape[1] < 1:
            raise GLREError("dim must be positive")
        if data.shape[0] != len(ids):
            raise GLREError(f"{len(ids)} ids but {data.shape[0]} rows")
        for i in ids:
            if not isinstance(i, str) or not i:
                raise GLREError(f"ids must be non-empty strings, got {i!r}")
        row = {}
        for n, i in enumerate(ids):
            if i in row:
                raise DuplicateIdError(f"duplicate id {i!r}")
            row[i] = n
        if not np.isfinite(data).all():
            bad = ids[int(np.argwhere(~np.isfinite(data))[0, 0])]
            raise NonFiniteError(f"non-finite value in row {bad!r}")
        if self.normalized and len(ids):
            norms = np.sqrt(np.einsum("ij,ij->i", data.astype(np.float64), data.astype(np.float64)))
            off = np.abs(norms - 1.0) > NORM_TOL
            if off.any():
                raise GLREError(
                    f"row {ids[int(np.argmax(off))]!r} flagged normalized but has norm "
                    f"{norms[int(np.argmax(off))]:.8g}"
                )
        data.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "normalized", bool(self.normalized))
        object.__setattr__(self, "_row", row)

    @classmethod
    def empty(cls, dim: int, normalized: bool = False) -> "EmbeddingSet":
        return cls((), np.zeros((0, dim), dtype=np.float32), normalized)

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item: object) -> bool:
        return item in self._row

    def vector(self, id_: str) -> np.ndarray:
        return self.data[self._row[id_]]

    def subset(self, ids: Sequence[str]) -> "EmbeddingSet":
        """Rows for ``ids`` in the given order."""
        try:
            rows = [self._row[i] for i in ids]
        except KeyError as exc:
            raise IdMismatchError(f"id {exc.args[0]!r} not in set") from None
        return EmbeddingSet(tuple(ids), self.data[rows], self.normalized)

    def equals_bitwise(self, other: "EmbeddingSet") -> bool:
        return (
            self.ids == other.ids
            and self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )


def save_embeddings(emb: EmbeddingSet, destination: BinaryIO) -> int:
    """Write ``emb`` to a binary sink in GLRE v1 form; returns bytes written."""
    table = bytearray()
    for i in emb.ids:
        raw = i.encode("utf-8")
        if len(raw) > MAX_ID_BYTES:
            raise GLREError(f"id of {len(raw)} bytes exceeds the {MAX_ID_BYTES}-byte limit")
        table += struct.pack("<H", len(raw))
        table += raw
    flags = FLAG_NORMALIZED if emb.normalized else 0
    header = HEADER.pack(MAGIC, VERSION, len(emb), emb.dim, flags)
    payload = emb.data.astype("<f4", copy=False).tobytes(order="C")
    written = 0
    for chunk in (header, bytes(table), payload):
        n = destination.write(chunk)
        written += len(chunk) if n is None else n
    return written


def load_embeddings(source: BinaryIO) -> EmbeddingSet:
    """Parse a GLRE v1 stream, rejecting anything malformed."""
    head = source.read(HEADER.size)
    if len(head) >= 4 and head[:4] != MAGIC:
        raise BadMagicError(f"bad magic {head[:4]!r}")
    if len(head) < HEADER.size:
        raise TruncatedError(f"header truncated at {len(head)} bytes")
    _, version, count, dim, flags = HEADER.unpack(head)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported GLRE version {version}")
    if dim < 1:
        raise GLREError("dim must be positive")

    ids = []
    for n in range(count):
        lb = source.read(2)
        if len(lb) < 2:
            raise TruncatedError(f"id table truncated at record {n}")
        (length,) = struct.unpack("<H", lb)
        raw = source.read(length)
        if len(raw) < length:
            raise TruncatedError(f"id table truncated at record {n}")
        try:
            ids.append(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise GLREError(f"id {n} is not valid UTF-8") from exc

    need = count * dim * 4
    payload = source.read(need)
    if len(payload) < need:
        raise TruncatedError(f"payload truncated: expected {need} bytes, got {len(payload)}")
    if source.read(1):
        raise GLREError("trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return EmbeddingSet(tuple(ids), data, bool(flags & FLAG_NORMALIZED))


def write_glre(path: str | os.PathLike, emb: EmbeddingSet) -> int:
    buf = io.BytesIO()
    n = save_embeddings(emb, buf)
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    return n


def read_glre(path: str | os.PathLike) -> EmbeddingSet:
    with open(path, "rb") as f:
        return load_embeddings(f)


def l2_normalize(emb: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit L2 norm (computed in float64)."""
    x = emb.data.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = norms == 0.0
    if zero.any():
        raise ZeroNormError(f"row {emb.ids[int(np.argmax(zero))]!r} has zero norm")
    return EmbeddingSet(emb.ids, (x / norms[:, None]).astype(np.float32), True)


def align_by_ids(sets: Sequence[EmbeddingSet]) -> list[EmbeddingSet]:
    """Reorder every set to the first set's id order.

    All sets must hold exactly the same ids; the first offending id is named
    in the error otherwise.
    """
    if not sets:
        return []
    ref = sets[0]
    out = [ref]
    for s in sets[1:]:
        for i in ref.ids:
            if i not in s:
                raise IdMismatchError(f"id {i!r} missing from a set")
        if len(s) != len(ref):
            extra = next(i for i in s.ids if i not in ref)
            raise IdMismatchError(f"id {extra!r} missing from the first set")
        out.append(s if s.ids == ref.ids else s.subset(ref.ids))
    return out
