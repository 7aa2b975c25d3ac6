"""GLRH head checkpoints.

Layout, little-endian: magic b"GLRH", u32 version (1), u32 d_in, u32 d_emb,
u32 C, f64 scale, proj (d_in x d_emb f32), prototypes (C x d_emb f32).
Optimizer state is not stored.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from .head import CosineHead

__all__ = ["CheckpointError", "save_head", "load_head", "write_glrh", "read_glrh"]

MAGIC = b"GLRH"
VERSION = 1
HEADER = struct.Struct("<4sIIIId")


class CheckpointError(ValueError):
    pass


def save_head(head: CosineHead, destination) -> int:
    blob = (
        HEADER.pack(MAGIC, VERSION, head.d_in, head.d_emb, head.num_classes, head.scale)
        + head.proj.astype("<f4").tobytes(order="C")
        + head.prototypes.astype("<f4").tobytes(order="C")
    )
    destination.write(blob)
    return len(blob)


def load_head(source) -> CosineHead:
    head = source.read(HEADER.size)
    if len(head) >= 4 and head[:4] != MAGIC:
        raise CheckpointError(f"bad magic {head[:4]!r}")
    if len(head) < HEADER.size:
        raise CheckpointError("checkpoint header truncated")
    _, version, d_in, d_emb, c, scale = HEADER.unpack(head)
    if version != VERSION:
        raise CheckpointError(f"unsupported GLRH version {version}")
    n_proj, n_protos = d_in * d_emb, c * d_emb
    body = source.read(4 * (n_proj + n_protos))
    if len(body) != 4 * (n_proj + n_protos):
        raise CheckpointError("checkpoint payload truncated")
    if source.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    flat = np.frombuffer(body, dtype="<f4")
    proj = flat[:n_proj].reshape(d_in, d_emb).astype(np.float32)
    protos = flat[n_proj:].reshape(c, d_emb).astype(np.float32)
    return CosineHead(proj, protos, scale)


def write_glrh(path: str | os.PathLike, head: CosineHead) -> int:
    buf = io.BytesIO()
    n = save_head(head, buf)
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    return n


def read_glrh(path: str | os.PathLike) -> CosineHead:
    with open(path, "rb") as f:
        return load_head(f)
