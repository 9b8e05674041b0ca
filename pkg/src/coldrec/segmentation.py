"""Warm-user segmentation: seeded k-means in embedding space, cold-user
segment assignment, per-segment popular items and segment profiles.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Catalog, EmbeddingTable, UserUniverse, ValidationError
from .events import InteractionLog

_MAGIC = b"SEG1"
_VERSION = 1


class SegmentationFormatError(Exception):
    """Segmentation container file is corrupt or has the wrong version."""


@dataclass(frozen=True)
class SegmentProfile:
    country: str  # modal, "unknown" when unavailable
    age_class: str
    genres: tuple[str, ...]
    member_count: int


@dataclass
class Segmentation:
    """Centroids, warm-user assignments and precomputed popular items.

    ``top_items`` maps segment -> [(track, distinct listeners)] descending;
    ``global_top`` is the same ranking over all warm users, used to pad
    short segment lists.
    """

    centroids: np.ndarray  # (k, d)
    assignment: dict[int, int]  # warm user -> segment
    top_items: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    global_top: list[tuple[int, int]] = field(default_factory=list)
    metric: str = "euclidean"

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def members(self, segment: int) -> list[int]:
        return sorted(u for u, s in self.assignment.items() if s == segment)

    def validate(self) -> None:
        if not self.assignment:
            raise ValidationError("segmentation has no assigned users")
        sizes = Counter(self.assignment.values())
        empty = [s for s in range(self.k) if sizes.get(s, 0) == 0]
        if empty:
            raise ValidationError(f"empty segments: {empty[:10]}")
        bad = [u for u, s in self.assignment.items() if not 0 <= s < self.k]
        if bad:
            raise ValidationError(f"assignments out of range for users {bad[:10]}")


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # all remaining mass on already-chosen points; pick any new index
            remaining = sorted(set(range(n)) - set(chosen))
            chosen.append(remaining[int(rng.integers(len(remaining)))])
        else:
            idx = int(rng.choice(n, p=d2 / total))
            chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[chosen[-1]]) ** 2, axis=1))
    return points[chosen].copy()


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # squared distances via the expansion trick; exact argmin ties go to the
    # lowest centroid index (np.argmin behavior)
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    labels = np.argmin(d2, axis=1)
    return labels, d2


def kmeans(
    points: EmbeddingTable | np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ init and Euclidean distance.

    Empty clusters are re-seeded with the point farthest from its assigned
    centroid. Stops when relative centroid movement drops below ``tol`` or
    after ``max_iter`` iterations. Returns (labels, centroids, objective
    history); the within-cluster sum of squares is non-increasing across
    iterations.
    """
    if isinstance(points, EmbeddingTable):
        x = points.vectors
    else:
        x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if k > n:
        raise ValidationError(f"k={k} exceeds the number of points {n}")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, k, rng)
    history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        labels, d2 = _assign(x, centroids)
        point_d2 = d2[np.arange(n), labels]
        counts = np.bincount(labels, minlength=k)
        for empty in np.nonzero(counts == 0)[0]:
            # farthest point whose donor cluster keeps at least one member
            candidates = np.where(counts[labels] > 1, point_d2, -1.0)
            far = int(np.argmax(candidates))
            counts[labels[far]] -= 1
            counts[empty] = 1
            labels[far] = empty
            point_d2[far] = 0.0
        new_centroids = np.zeros_like(centroids)
        for c in range(k):
            new_centroids[c] = x[labels == c].mean(axis=0)
        obj = float(np.sum((x - new_centroids[labels]) ** 2))
        if history and obj > history[-1] * (1 + 1e-9) + 1e-12:
            raise AssertionError(f"k-means objective increased: {history[-1]} -> {obj}")
        history.append(obj)
        shift = np.linalg.norm(new_centroids - centroids)
        scale = np.linalg.norm(centroids) + 1e-12
        centroids = new_centroids
        if shift / scale < tol:
            break
    return labels, centroids, history


def assign_segment(v: np.ndarray, centroids: np.ndarray, metric: str = "euclidean") -> int:
    """Index of the closest centroid; ties resolve to the lowest index."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (centroids.shape[1],):
        raise ValidationError(f"vector dim {v.shape} vs centroid dim {centroids.shape[1]}")
    if metric == "cosine":
        norm = np.linalg.norm(v)
        v = v / norm if norm > 0 else v
        cn = np.linalg.norm(centroids, axis=1)
        cn[cn == 0.0] = 1.0
        centroids = centroids / cn[:, None]
    elif metric != "euclidean":
        raise ValidationError(f"unknown assignment metric {metric!r}")
    d2 = np.sum((centroids - v) ** 2, axis=1)
    return int(np.argmin(d2))


# ---------------------------------------------------------------------------
# per-segment popularity and profiles
# ---------------------------------------------------------------------------


def _popularity_ranking(
    users: Sequence[int],
    log: InteractionLog,
    catalog: Catalog,
    by_listeners: bool = True,
) -> list[tuple[int, int]]:
    """Tracks ranked by popularity among ``users``.

    Popularity is the number of distinct listeners by default (robust to
    single heavy users); set ``by_listeners=False`` for raw stream counts.
    Ties break by global popularity rank, then id.
    """
    counter: Counter[int] = Counter()
    for u in sorted(users):
        streams = log.stream_counts(u)
        for t, n in streams.items():
            if t in catalog.meta:
                counter[t] += 1 if by_listeners else n
    ranked = sorted(
        counter.items(), key=lambda kv: (-kv[1], catalog.rank_of(kv[0]), kv[0])
    )
    return ranked


def full_popularity_ranking(
    users: Sequence[int],
    log: InteractionLog,
    catalog: Catalog,
    by_listeners: bool = True,
) -> list[tuple[int, int]]:
    """Popularity ranking over the whole catalog: listened tracks first,
    then the unlistened tail ordered by global popularity rank (count 0)."""
    ranked = _popularity_ranking(users, log, catalog, by_listeners)
    seen = {t for t, _ in ranked}
    tail = sorted(
        (t for t in catalog.meta if t not in seen),
        key=lambda t: (catalog.rank_of(t), t),
    )
    return ranked + [(t, 0) for t in tail]


def segment_top_items(
    seg: Segmentation,
    log: InteractionLog,
    catalog: Catalog,
    k_items: int,
    by_listeners: bool = True,
) -> dict[int, list[tuple[int, int]]]:
    """Top ``k_items`` tracks per segment by distinct-listener popularity."""
    members: dict[int, list[int]] = {s: [] for s in range(seg.k)}
    for user, s in seg.assignment.items():
        members[s].append(user)
    return {
        s: _popularity_ranking(users, log, catalog, by_listeners)[:k_items]
        for s, users in members.items()
    }


def attach_top_items(
    seg: Segmentation,
    log: InteractionLog,
    catalog: Catalog,
    k_items: int,
    by_listeners: bool = True,
) -> Segmentation:
    """Fill ``top_items`` and ``global_top`` in place and return ``seg``.

    ``global_top`` ranks the whole catalog so semi-personalized lists can
    always be padded to full length."""
    seg.top_items = segment_top_items(seg, log, catalog, k_items, by_listeners)
    seg.global_top = full_popularity_ranking(
        sorted(seg.assignment), log, catalog, by_listeners
    )
    return seg


def describe_segment(
    segment: int,
    seg: Segmentation,
    universe: UserUniverse,
    log: InteractionLog,
    catalog: Catalog,
    top_genres: int = 3,
) -> SegmentProfile:
    """Modal country/age class plus top genre tags among members' favorite
    and streamed artists."""
    from .features import age_class  # local import avoids a cycle

    members = seg.members(segment)
    if not members:
        raise ValidationError(f"segment {segment} does not exist or is empty")
    countries: Counter[str] = Counter()
    ages: Counter[str] = Counter()
    genres: Counter[str] = Counter()
    for u in members:
        demo = universe.demographics_of(u)
        if demo.country:
            countries[demo.country] += 1
        cls = age_class(demo.age)
        if cls != "unknown":
            ages[cls] += 1
        artist_ids: set[int] = set()
        for ev in log.for_user(u):
            if ev.signal == "favorite" and ev.level == "artist":
                artist_ids.add(ev.entity)
            elif ev.signal in ("stream", "favorite") and ev.level == "track":
                if ev.entity in catalog.meta:
                    artist_ids.add(catalog.meta[ev.entity].artist_id)
        tags: set[str] = set()
        for aid in sorted(artist_ids):
            for tid in catalog.artist_tracks(aid):
                tags.update(catalog.meta[tid].genres)
        genres.update(sorted(tags))

    def modal(counter: Counter[str]) -> str:
        if not counter:
            return "unknown"
        return min(counter.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    top = [g for g, _ in sorted(genres.items(), key=lambda kv: (-kv[1], kv[0]))[:top_genres]]
    return SegmentProfile(
        country=modal(countries),
        age_class=modal(ages),
        genres=tuple(top),
        member_count=len(members),
    )


def build_segmentation(
    warm_users: EmbeddingTable,
    k: int,
    log: InteractionLog,
    catalog: Catalog,
    k_items: int = 50,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-4,
    metric: str = "euclidean",
    by_listeners: bool = True,
) -> Segmentation:
    """Cluster warm users and precompute per-segment popular tracks."""
    labels, centroids, _ = kmeans(warm_users, k, seed=seed, max_iter=max_iter, tol=tol)
    assignment = {int(u): int(c) for u, c in zip(warm_users.ids, labels)}
    seg = Segmentation(centroids=centroids, assignment=assignment, metric=metric)
    seg.validate()
    return attach_top_items(seg, log, catalog, k_items, by_listeners)


# ---------------------------------------------------------------------------
# container serialization
# ---------------------------------------------------------------------------


def _write_item_list(fh, items: list[tuple[int, int]]) -> None:
    fh.write(struct.pack("<I", len(items)))
    for track, count in items:
        fh.write(struct.pack("<QI", track, count))


def _read_item_list(buf: memoryview, off: int) -> tuple[list[tuple[int, int]], int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    items = []
    for _ in range(n):
        track, count = struct.unpack_from("<QI", buf, off)
        off += 12
        items.append((int(track), int(count)))
    return items, off


def save_segmentation(seg: Segmentation, path: str | Path) -> None:
    """One container: header, centroid block (EMB1 row layout), assignment
    pairs, per-segment and global top-item lists."""
    with open(path, "wb") as fh:
        metric_flag = 0 if seg.metric == "euclidean" else 1
        fh.write(struct.pack("<4sIIIB", _MAGIC, _VERSION, seg.k, seg.dim, metric_flag))
        cents = np.ascontiguousarray(seg.centroids, dtype="<f4")
        for s in range(seg.k):
            fh.write(struct.pack("<Q", s))
            fh.write(cents[s].tobytes())
        users = sorted(seg.assignment)
        fh.write(struct.pack("<Q", len(users)))
        for u in users:
            fh.write(struct.pack("<QI", u, seg.assignment[u]))
        for s in range(seg.k):
            _write_item_list(fh, seg.top_items.get(s, []))
        _write_item_list(fh, seg.global_top)


def load_segmentation(path: str | Path) -> Segmentation:
    data = memoryview(Path(path).read_bytes())
    try:
        magic, version, k, dim, metric_flag = struct.unpack_from("<4sIIIB", data, 0)
        if magic != _MAGIC:
            raise SegmentationFormatError(f"{path}: bad magic {bytes(magic)!r}")
        if version != _VERSION:
            raise SegmentationFormatError(f"{path}: unsupported version {version}")
        off = struct.calcsize("<4sIIIB")
        centroids = np.zeros((k, dim))
        for s in range(k):
            (sid,) = struct.unpack_from("<Q", data, off)
            off += 8
            if sid != s:
                raise SegmentationFormatError(f"{path}: centroid ids out of order")
            centroids[s] = np.frombuffer(data, dtype="<f4", count=dim, offset=off)
            off += 4 * dim
        (n_assign,) = struct.unpack_from("<Q", data, off)
        off += 8
        assignment = {}
        for _ in range(n_assign):
            u, s = struct.unpack_from("<QI", data, off)
            off += 12
            assignment[int(u)] = int(s)
        top_items = {}
        for s in range(k):
            top_items[s], off = _read_item_list(data, off)
        global_top, off = _read_item_list(data, off)
        if off != len(data):
            raise SegmentationFormatError(f"{path}: {len(data) - off} trailing bytes")
    except struct.error as exc:
        raise SegmentationFormatError(f"{path}: truncated file") from exc
    metric = "euclidean" if metric_flag == 0 else "cosine"
    return Segmentation(
        centroids=centroids,
        assignment=assignment,
        top_items=top_items,
        global_top=global_top,
        metric=metric,
    )


def export_segmentation_text(seg: Segmentation, path: str | Path) -> None:
    """Line-delimited inspection dump of the container contents."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"k\t{seg.k}\td\t{seg.dim}\tmetric\t{seg.metric}\n")
        for s in range(seg.k):
            comps = ",".join(repr(float(v)) for v in seg.centroids[s])
            fh.write(f"centroid\t{s}\t{comps}\n")
        for u in sorted(seg.assignment):
            fh.write(f"assign\t{u}\t{seg.assignment[u]}\n")
        for s in range(seg.k):
            items = ",".join(f"{t}:{c}" for t, c in seg.top_items.get(s, []))
            fh.write(f"top\t{s}\t{items}\n")
        fh.write("global\t" + ",".join(f"{t}:{c}" for t, c in seg.global_top) + "\n")
