"""Shared entity types and vector math used by every other module.

Ids are plain ints everywhere (users, tracks, artists, albums, playlists);
each entity kind lives in its own id namespace.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

EntityId = int


class ZeroVectorWarning(UserWarning):
    """A similarity was requested against an all-zero vector; result is 0."""


class ValidationError(ValueError):
    """A domain invariant was violated; message names the offending records."""


# ---------------------------------------------------------------------------
# catalog / users
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrackMeta:
    artist_id: int
    album_id: int
    rank: int  # global popularity rank, 1 = most popular
    genres: tuple[str, ...] = ()


class Catalog:
    """The track universe: metadata, popularity ranks and playlist tracklists."""

    def __init__(
        self,
        meta: Mapping[int, TrackMeta],
        playlists: Mapping[int, Sequence[int]] | None = None,
    ):
        self.meta = dict(meta)
        self.playlists = {
            pid: tuple(tracks) for pid, tracks in (playlists or {}).items()
        }
        self._by_artist: dict[int, tuple[int, ...]] | None = None
        self._by_album: dict[int, tuple[int, ...]] | None = None
        self.validate()

    @property
    def size(self) -> int:
        return len(self.meta)

    @property
    def tracks(self) -> frozenset[int]:
        return frozenset(self.meta)

    def sorted_tracks(self) -> list[int]:
        return sorted(self.meta)

    def validate(self) -> None:
        ranks = sorted(m.rank for m in self.meta.values())
        if ranks != list(range(1, len(self.meta) + 1)):
            bad = [t for t, m in self.meta.items() if not 1 <= m.rank <= len(self.meta)]
            raise ValidationError(
                f"popularity ranks must be a bijection onto 1..{len(self.meta)}; "
                f"offending tracks: {sorted(bad)[:10] or 'duplicate ranks'}"
            )
        for pid, tracks in self.playlists.items():
            missing = [t for t in tracks if t not in self.meta]
            if missing:
                raise ValidationError(
                    f"playlist {pid} references unknown tracks {missing[:10]}"
                )

    def _build_reverse(self) -> None:
        by_artist: dict[int, list[int]] = {}
        by_album: dict[int, list[int]] = {}
        for tid in sorted(self.meta):
            m = self.meta[tid]
            by_artist.setdefault(m.artist_id, []).append(tid)
            by_album.setdefault(m.album_id, []).append(tid)
        self._by_artist = {a: tuple(ts) for a, ts in by_artist.items()}
        self._by_album = {a: tuple(ts) for a, ts in by_album.items()}

    def artist_tracks(self, artist_id: int) -> tuple[int, ...]:
        if self._by_artist is None:
            self._build_reverse()
        return self._by_artist.get(artist_id, ())

    def album_tracks(self, album_id: int) -> tuple[int, ...]:
        if self._by_album is None:
            self._build_reverse()
        return self._by_album.get(album_id, ())

    def playlist_tracks(self, playlist_id: int) -> tuple[int, ...]:
        return self.playlists.get(playlist_id, ())

    def rank_of(self, track_id: int) -> int:
        return self.meta[track_id].rank

    def artists(self) -> list[int]:
        if self._by_artist is None:
            self._build_reverse()
        return sorted(self._by_artist)


@dataclass(frozen=True)
class Demographics:
    country: str | None = None  # ISO code, None = unknown
    age: int | None = None  # years, None = unknown


class UserUniverse:
    """Warm/cold user sets plus per-user demographics."""

    def __init__(
        self,
        warm: Iterable[int],
        cold: Iterable[int],
        demographics: Mapping[int, Demographics],
    ):
        self.warm = frozenset(warm)
        self.cold = frozenset(cold)
        self.demographics = dict(demographics)
        self.validate()

    def validate(self) -> None:
        overlap = self.warm & self.cold
        if overlap:
            raise ValidationError(
                f"users cannot be both warm and cold: {sorted(overlap)[:10]}"
            )
        missing = (self.warm | self.cold) - set(self.demographics)
        if missing:
            raise ValidationError(
                f"users without demographics entry: {sorted(missing)[:10]}"
            )

    @property
    def n_warm(self) -> int:
        return len(self.warm)

    def demographics_of(self, user: int) -> Demographics:
        return self.demographics.get(user, Demographics())


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


class EmbeddingTable:
    """Dense d-dimensional vectors keyed by entity id.

    Rows are stored sorted by ascending id, which makes serialization
    canonical and similarity tie-breaks (stable sorts) deterministic.
    """

    def __init__(self, ids: Iterable[int], vectors: np.ndarray):
        ids = np.asarray(list(ids), dtype=np.int64)
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
            raise ValidationError(
                f"ids/vectors mismatch: {len(ids)} ids vs shape {vectors.shape}"
            )
        if len(np.unique(ids)) != len(ids):
            raise ValidationError("duplicate entity ids in embedding table")
        if vectors.size and not np.all(np.isfinite(vectors)):
            bad = ids[~np.all(np.isfinite(vectors), axis=1)]
            raise ValidationError(f"non-finite embedding rows for ids {bad[:10]}")
        order = np.argsort(ids)
        self.ids = ids[order]
        self.vectors = np.ascontiguousarray(vectors[order])
        self._index = {int(i): k for k, i in enumerate(self.ids)}

    @classmethod
    def from_dict(cls, rows: Mapping[int, Sequence[float]], dim: int | None = None) -> "EmbeddingTable":
        if not rows:
            return cls.empty(dim if dim is not None else 0)
        ids = sorted(rows)
        return cls(ids, np.array([rows[i] for i in ids], dtype=np.float64))

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingTable":
        return cls(np.empty(0, dtype=np.int64), np.empty((0, dim), dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, entity_id: int) -> bool:
        return entity_id in self._index

    def get(self, entity_id: int) -> np.ndarray:
        return self.vectors[self._index[entity_id]]

    def row_index(self, entity_id: int) -> int:
        return self._index[entity_id]

    def subset(self, ids: Iterable[int]) -> "EmbeddingTable":
        keep = [i for i in ids if i in self._index]
        return EmbeddingTable(keep, np.array([self.get(i) for i in keep]).reshape(len(keep), self.dim))

    def equals(self, other: "EmbeddingTable") -> bool:
        return (
            self.dim == other.dim
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.vectors, other.vectors)
        )


@dataclass(frozen=True)
class MeanResult:
    """Mean of embedding rows; ``is_null`` marks 'nothing resolved' zeros."""

    vector: np.ndarray
    is_null: bool
    n_found: int = 0
    n_missing: int = 0


# ---------------------------------------------------------------------------
# vector operations
# ---------------------------------------------------------------------------


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; zero vectors give 0.0 with a warning."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"vector length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine similarity against a zero vector", ZeroVectorWarning)
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def mean_embedding(ids: Sequence[int], table: EmbeddingTable) -> MeanResult:
    """Arithmetic mean of the rows found for ``ids`` (duplicates count).

    Missing ids are skipped and counted. Summation runs in ascending-id
    order so the result is independent of the input ordering.
    """
    counts: dict[int, int] = {}
    n_missing = 0
    for i in ids:
        if i in table:
            counts[i] = counts.get(i, 0) + 1
        else:
            n_missing += 1
    if not counts:
        return MeanResult(np.zeros(table.dim), is_null=True, n_missing=n_missing)
    total = 0
    acc = np.zeros(table.dim)
    for i in sorted(counts):
        c = counts[i]
        acc += c * table.get(i)
        total += c
    return MeanResult(acc / total, is_null=False, n_found=total, n_missing=n_missing)


def top_k_by_similarity(
    query: np.ndarray,
    table: EmbeddingTable,
    k: int,
    exclude: Iterable[int] = (),
    metric: str = "cosine",
) -> list[tuple[int, float]]:
    """Exact top-k rows by similarity to ``query``, descending.

    Ties break by ascending entity id. ``metric`` is "cosine" (default) or
    "dot". Excluded ids are never returned.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(table) == 0:
        return []
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (table.dim,):
        raise ValidationError(f"query dim {query.shape} vs table dim {table.dim}")
    scores = table.vectors @ query
    if metric == "cosine":
        qn = np.linalg.norm(query)
        rn = np.linalg.norm(table.vectors, axis=1)
        if qn == 0.0:
            warnings.warn("top-k query is a zero vector", ZeroVectorWarning)
            scores = np.zeros(len(table))
        else:
            safe = np.where(rn == 0.0, 1.0, rn)
            scores = scores / (qn * safe)
            scores[rn == 0.0] = 0.0
    elif metric != "dot":
        raise ValidationError(f"unknown similarity metric {metric!r}")
    mask = np.ones(len(table), dtype=bool)
    excluded = set(exclude)
    if excluded:
        for e in excluded:
            if e in table:
                mask[table.row_index(e)] = False
    idx = np.nonzero(mask)[0]
    # ids ascending in storage, so a stable sort on -score breaks ties by id
    order = idx[np.argsort(-scores[idx], kind="stable")][:k]
    return [(int(table.ids[i]), float(scores[i])) for i in order]
