from __future__ import annotations

import numpy as np
import pytest

from coldrec.core import EmbeddingTable
from coldrec.embio import (
    EmbeddingFormatError,
    read_embeddings,
    read_embeddings_text,
    write_embeddings,
    write_embeddings_text,
)


def f32_table(seed=0, n=7, d=5):
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((n, d)).astype(np.float32).astype(np.float64)
    return EmbeddingTable(np.arange(10, 10 + n), vecs)


def test_binary_roundtrip(tmp_path):
    table = f32_table()
    path = tmp_path / "t.emb1"
    write_embeddings(table, path)
    loaded = read_embeddings(path)
    assert loaded.equals(table)


def test_binary_write_is_canonical(tmp_path):
    table = f32_table()
    write_embeddings(table, tmp_path / "a.emb1")
    write_embeddings(table, tmp_path / "b.emb1")
    assert (tmp_path / "a.emb1").read_bytes() == (tmp_path / "b.emb1").read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "t.emb1"
    write_embeddings(f32_table(), path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(EmbeddingFormatError, match="magic"):
        read_embeddings(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "t.emb1"
    write_embeddings(f32_table(), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(EmbeddingFormatError):
        read_embeddings(path)


def test_empty_table_roundtrip(tmp_path):
    path = tmp_path / "t.emb1"
    write_embeddings(EmbeddingTable.empty(4), path)
    loaded = read_embeddings(path)
    assert len(loaded) == 0 and loaded.dim == 4


def test_text_roundtrip(tmp_path):
    table = f32_table(seed=3)
    path = tmp_path / "t.tsv"
    write_embeddings_text(table, path)
    loaded = read_embeddings_text(path)
    assert loaded.equals(table)


def test_text_malformed_line(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("1\tnot,a,float,x\n")
    with pytest.raises(EmbeddingFormatError):
        read_embeddings_text(path)
