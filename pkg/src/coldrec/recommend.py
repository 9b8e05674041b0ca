"""Ranked track lists for cold users: the production semi-personalized
strategy, the fully-personalized variant, and three baselines.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import Catalog, EmbeddingTable, ValidationError, mean_embedding, top_k_by_similarity
from .events import InteractionLog
from .segmentation import (
    Segmentation,
    _popularity_ranking,
    assign_segment,
    full_popularity_ranking,
    kmeans,
)

STRATEGIES = ("semi", "full", "popularity", "reg-streams", "feat-cluster")


@dataclass(frozen=True)
class Recommendation:
    user: int
    items: tuple[tuple[int, float], ...]  # (track, score), scores non-increasing
    strategy: str
    segment: int | None = None

    @property
    def tracks(self) -> tuple[int, ...]:
        return tuple(t for t, _ in self.items)

    def validate(self) -> None:
        tracks = self.tracks
        if len(set(tracks)) != len(tracks):
            raise ValidationError(f"duplicate tracks in recommendation for {self.user}")
        scores = [s for _, s in self.items]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise ValidationError(f"scores not non-increasing for {self.user}")


def _pad_from(items: list[tuple[int, float]], pool: Sequence[tuple[int, int]], k: int):
    """Extend with pool entries (score 0) until k items, skipping duplicates."""
    seen = {t for t, _ in items}
    for track, _ in pool:
        if len(items) >= k:
            break
        if track not in seen:
            items.append((track, 0.0))
            seen.add(track)
    return items


def recommend_semi_personalized(
    user: int, user_emb: np.ndarray, seg: Segmentation, k: int
) -> Recommendation:
    """Assign to the nearest segment and return its precomputed top items.

    Lists shorter than k are padded from the global popularity ranking so
    the output length is always min(k, catalog)."""
    segment = assign_segment(user_emb, seg.centroids, metric=seg.metric)
    items = [(t, float(c)) for t, c in seg.top_items.get(segment, [])[:k]]
    if len(items) < k:
        _pad_from(items, seg.global_top, k)
    return Recommendation(user=user, items=tuple(items), strategy="semi", segment=segment)


def recommend_full_personalized(
    user: int,
    user_emb: np.ndarray,
    tracks: EmbeddingTable,
    k: int,
    popularity: Sequence[tuple[int, int]] = (),
) -> Recommendation:
    """Exact cosine nearest-neighbor tracks for the user's vector.

    A null (all-zero) embedding cannot be ranked against; it falls back to
    the popularity list with a warning."""
    if not np.any(user_emb):
        warnings.warn(f"null embedding for user {user}; falling back to popularity")
        items = _pad_from([], popularity, k)
        return Recommendation(user=user, items=tuple(items), strategy="full")
    ranked = top_k_by_similarity(user_emb, tracks, k)
    return Recommendation(user=user, items=tuple(ranked), strategy="full")


def baseline_popularity(
    catalog: Catalog, log: InteractionLog, k: int, by_listeners: bool = True
) -> Recommendation:
    """Global distinct-listener chart; the same list for every user."""
    ranked = full_popularity_ranking(log.users(), log, catalog, by_listeners)[:k]
    items = tuple((t, float(c)) for t, c in ranked)
    return Recommendation(user=-1, items=items, strategy="popularity")


def baseline_registration_streams(
    user: int,
    reg_events: InteractionLog,
    tracks: EmbeddingTable,
    k: int,
    popularity: Sequence[tuple[int, int]] = (),
) -> Recommendation:
    """Mean of registration-day streamed-track embeddings, then nearest
    neighbors; users without any stream get the popularity list."""
    counts = reg_events.stream_counts(user)
    ids: list[int] = []
    for t in sorted(counts):
        ids.extend([t] * counts[t])
    mean = mean_embedding(ids, tracks)
    if mean.is_null:
        items = tuple(_pad_from([], popularity, k))
        return Recommendation(user=user, items=items, strategy="reg-streams")
    ranked = top_k_by_similarity(mean.vector, tracks, k)
    return Recommendation(user=user, items=tuple(ranked), strategy="reg-streams")


def baseline_input_feature_clustering(
    warm_features: EmbeddingTable,
    cold_features: EmbeddingTable,
    n_clusters: int,
    warm_log: InteractionLog,
    catalog: Catalog,
    k: int,
    seed: int = 0,
    by_listeners: bool = True,
) -> dict[int, Recommendation]:
    """Cluster users on raw stacked input features instead of embeddings.

    k-means runs on warm feature vectors; cold users go to the nearest
    centroid and receive the cluster's most popular tracks."""
    labels, centroids, _ = kmeans(warm_features, n_clusters, seed=seed)
    members: dict[int, list[int]] = {c: [] for c in range(n_clusters)}
    for u, c in zip(warm_features.ids, labels):
        members[int(c)].append(int(u))
    cluster_top = {
        c: _popularity_ranking(us, warm_log, catalog, by_listeners)
        for c, us in members.items()
    }
    global_top = full_popularity_ranking(
        [int(u) for u in warm_features.ids], warm_log, catalog, by_listeners
    )
    out: dict[int, Recommendation] = {}
    for idx, user in enumerate(cold_features.ids):
        c = assign_segment(cold_features.vectors[idx], centroids)
        items = [(t, float(n)) for t, n in cluster_top[c][:k]]
        if len(items) < k:
            _pad_from(items, global_top, k)
        out[int(user)] = Recommendation(
            user=int(user), items=tuple(items), strategy="feat-cluster", segment=c
        )
    return out
