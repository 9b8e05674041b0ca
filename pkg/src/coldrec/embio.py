"""EMB1 embedding file format.

Binary layout: magic ``EMB1``, u32 version, u32 d, u64 row count, then per
row a u64 id followed by d little-endian float32 components. A line-based
text twin (``id<TAB>v1,v2,...``) exists for debugging.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import EmbeddingTable

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class EmbeddingFormatError(Exception):
    """Embedding file is corrupt, truncated or has the wrong version."""


def write_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    path = Path(path)
    n, d = len(table), table.dim
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, d, n))
        ids = np.ascontiguousarray(table.ids, dtype="<u8")
        vecs = np.ascontiguousarray(table.vectors, dtype="<f4")
        for i in range(n):
            fh.write(ids[i].tobytes())
            fh.write(vecs[i].tobytes())


def read_embeddings(path: str | Path) -> EmbeddingTable:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise EmbeddingFormatError(f"{path}: truncated header")
    magic, version, d, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    row_bytes = 8 + 4 * d
    expect = _HEADER.size + n * row_bytes
    if len(data) != expect:
        raise EmbeddingFormatError(
            f"{path}: expected {expect} bytes for {n} rows of dim {d}, got {len(data)}"
        )
    body = data[_HEADER.size :]
    ids = np.empty(n, dtype=np.int64)
    vecs = np.empty((n, d), dtype=np.float64)
    for i in range(n):
        off = i * row_bytes
        ids[i] = int.from_bytes(body[off : off + 8], "little")
        vecs[i] = np.frombuffer(body, dtype="<f4", count=d, offset=off + 8)
    if n and not np.all(np.isfinite(vecs)):
        raise EmbeddingFormatError(f"{path}: non-finite components")
    return EmbeddingTable(ids, vecs)


def write_embeddings_text(table: EmbeddingTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(table)):
            comps = ",".join(repr(float(v)) for v in table.vectors[i])
            fh.write(f"{int(table.ids[i])}\t{comps}\n")


def read_embeddings_text(path: str | Path) -> EmbeddingTable:
    ids: list[int] = []
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                ident, comps = line.split("\t")
                ids.append(int(ident))
                rows.append([float(v) for v in comps.split(",")])
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: {exc}") from exc
    if not ids:
        return EmbeddingTable.empty(0)
    return EmbeddingTable(ids, np.array(rows))
