from __future__ import annotations

from itertools import product

import numpy as np
import pytest

from coldrec.core import Catalog, Demographics, EmbeddingTable, TrackMeta, UserUniverse, ValidationError
from coldrec.events import Event, InteractionLog
from coldrec.segmentation import (
    Segmentation,
    SegmentationFormatError,
    assign_segment,
    build_segmentation,
    describe_segment,
    export_segmentation_text,
    full_popularity_ranking,
    kmeans,
    load_segmentation,
    save_segmentation,
    segment_top_items,
)


def brute_force_best_2_partition(points):
    """Exhaustively enumerate assignments into 2 nonempty clusters."""
    best = (np.inf, None)
    pts = np.asarray(points, dtype=float)
    for labels in product((0, 1), repeat=len(pts)):
        labels = np.array(labels)
        if labels.min() == labels.max():
            continue
        wcss = 0.0
        cents = []
        for c in (0, 1):
            members = pts[labels == c]
            cents.append(members.mean(axis=0))
            wcss += float(np.sum((members - cents[-1]) ** 2))
        if wcss < best[0]:
            best = (wcss, sorted(float(c[0]) for c in cents))
    return best


class TestKmeans:
    def test_separated_pair(self):
        labels, centroids, _ = kmeans(np.array([[0.0], [10.0]]), k=2, seed=0)
        assert sorted(centroids.ravel().tolist()) == [0.0, 10.0]

    def test_four_points_matches_exhaustive_oracle(self):
        points = np.array([[0.0], [1.0], [9.0], [10.0]])
        _, oracle_centroids = brute_force_best_2_partition(points)
        for seed in range(10):
            _, centroids, _ = kmeans(points, k=2, seed=seed)
            assert sorted(centroids.ravel().tolist()) == oracle_centroids == [0.5, 9.5]

    def test_k1_recovers_global_mean(self):
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((20, 3))
        _, centroids, _ = kmeans(pts, k=1, seed=0)
        assert np.allclose(centroids[0], pts.mean(axis=0))

    def test_k_exceeding_points_rejected(self):
        with pytest.raises(ValidationError):
            kmeans(np.zeros((3, 2)), k=4)

    def test_objective_monotone(self):
        rng = np.random.default_rng(3)
        pts = rng.standard_normal((200, 6))
        _, _, history = kmeans(pts, k=8, seed=1)
        for prev, cur in zip(history, history[1:]):
            assert cur <= prev * (1 + 1e-9) + 1e-12

    def test_no_empty_clusters_over_random_seeds(self):
        rng = np.random.default_rng(9)
        # three tight blobs force empty clusters during Lloyd iterations
        blobs = np.concatenate(
            [rng.standard_normal((12, 2)) * 0.01 + center
             for center in ([0, 0], [5, 5], [-5, 5])]
        )
        for seed in range(100):
            labels, _, _ = kmeans(blobs, k=8, seed=seed)
            assert len(set(labels.tolist())) == 8

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        pts = rng.standard_normal((50, 4))
        a = kmeans(pts, k=5, seed=11)
        b = kmeans(pts, k=5, seed=11)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_centroids_are_member_means(self):
        rng = np.random.default_rng(5)
        pts = rng.standard_normal((60, 3))
        labels, centroids, _ = kmeans(pts, k=4, seed=0)
        for c in range(4):
            assert np.allclose(centroids[c], pts[labels == c].mean(axis=0), atol=1e-6)

    def test_members_assigned_to_own_centroid_after_convergence(self):
        rng = np.random.default_rng(6)
        pts = rng.standard_normal((300, 5))
        labels, centroids, _ = kmeans(pts, k=6, seed=2, tol=1e-7, max_iter=300)
        agree = sum(
            assign_segment(pts[i], centroids) == labels[i] for i in range(len(pts))
        )
        assert agree >= 0.99 * len(pts)


class TestAssignSegment:
    def test_nearest(self):
        cents = np.array([[0.0], [10.0]])
        assert assign_segment(np.array([0.1]), cents) == 0

    def test_tie_goes_to_lowest_index(self):
        cents = np.array([[0.0], [2.0]])
        assert assign_segment(np.array([1.0]), cents) == 0

    def test_matches_brute_force_argmin(self):
        rng = np.random.default_rng(8)
        cents = rng.standard_normal((50, 7))
        for _ in range(20):
            v = rng.standard_normal(7)
            want = int(np.argmin([np.sum((c - v) ** 2) for c in cents]))
            assert assign_segment(v, cents) == want

    def test_cosine_mode(self):
        cents = np.array([[10.0, 0.0], [0.0, 1.0]])
        v = np.array([0.2, 1.0])
        assert assign_segment(v, cents, metric="cosine") == 1

    def test_dim_mismatch(self):
        with pytest.raises(ValidationError):
            assign_segment(np.zeros(3), np.zeros((2, 2)))


def tiny_world():
    catalog = Catalog(
        {
            1: TrackMeta(10, 20, rank=2, genres=("rock",)),
            2: TrackMeta(10, 20, rank=1, genres=("rock",)),
            3: TrackMeta(11, 21, rank=3, genres=("rap",)),
        }
    )
    log = InteractionLog(
        [
            Event(1, 0, "stream", "track", 1, 5),
            Event(2, 0, "stream", "track", 1, 1),
            Event(1, 0, "stream", "track", 3, 1),
            Event(3, 0, "stream", "track", 2, 2),
            Event(1, 0, "favorite", "artist", 10, 1),
        ]
    )
    return catalog, log


class TestTopItems:
    def test_distinct_listener_popularity(self):
        catalog, log = tiny_world()
        seg = Segmentation(
            centroids=np.zeros((1, 2)), assignment={1: 0, 2: 0, 3: 0}
        )
        top = segment_top_items(seg, log, catalog, k_items=2)
        # track 1: 2 listeners; tracks 2 and 3: 1 listener each, rank breaks tie
        assert [t for t, _ in top[0]] == [1, 2]

    def test_empty_segment_log_gives_empty_list(self):
        catalog, _ = tiny_world()
        seg = Segmentation(centroids=np.zeros((2, 2)), assignment={1: 0, 9: 1})
        top = segment_top_items(seg, InteractionLog(), catalog, k_items=3)
        assert top[1] == []

    def test_matches_count_and_sort_oracle(self):
        rng = np.random.default_rng(1)
        catalog = Catalog(
            {t: TrackMeta(0, 0, rank=t) for t in range(1, 11)}
        )
        events = []
        for u in (1, 2, 3):
            for t in rng.choice(range(1, 11), size=6, replace=False):
                events.append(Event(u, 0, "stream", "track", int(t), int(rng.integers(1, 4))))
        log = InteractionLog(events)
        seg = Segmentation(centroids=np.zeros((1, 2)), assignment={1: 0, 2: 0, 3: 0})
        top = segment_top_items(seg, log, catalog, k_items=10)[0]
        counts = {}
        for u in (1, 2, 3):
            for t in log.stream_counts(u):
                counts[t] = counts.get(t, 0) + 1
        oracle = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0], kv[0]))
        assert [t for t, _ in top] == [t for t, _ in oracle]

    def test_stream_count_mode(self):
        catalog, log = tiny_world()
        seg = Segmentation(centroids=np.zeros((1, 2)), assignment={1: 0, 2: 0, 3: 0})
        top = segment_top_items(seg, log, catalog, k_items=1, by_listeners=False)
        assert top[0][0] == (1, 6)  # 5 + 1 streams

    def test_full_ranking_covers_catalog(self):
        catalog, log = tiny_world()
        ranking = full_popularity_ranking([1, 2, 3], log, catalog)
        assert len(ranking) == catalog.size
        assert [t for t, _ in ranking][:2] == [1, 2]


class TestDescribeSegment:
    def world(self):
        catalog, log = tiny_world()
        universe = UserUniverse(
            warm={1, 2, 3},
            cold=set(),
            demographics={
                1: Demographics("FR", 20),
                2: Demographics("FR", 22),
                3: Demographics("BR", 40),
            },
        )
        seg = Segmentation(centroids=np.zeros((2, 2)), assignment={1: 0, 2: 0, 3: 1})
        return catalog, log, universe, seg

    def test_modal_country_and_age(self):
        catalog, log, universe, seg = self.world()
        profile = describe_segment(0, seg, universe, log, catalog)
        assert profile.country == "FR"
        assert profile.age_class == "18-24"
        assert profile.member_count == 2
        assert "rock" in profile.genres

    def test_single_member_segment(self):
        catalog, log, universe, seg = self.world()
        profile = describe_segment(1, seg, universe, log, catalog)
        assert profile.country == "BR" and profile.age_class == "35-49"

    def test_no_genre_tags(self):
        catalog, log, universe, seg = self.world()
        bare = Catalog({t: TrackMeta(10, 20, rank=m.rank) for t, m in catalog.meta.items()})
        profile = describe_segment(0, seg, universe, log, bare)
        assert profile.genres == ()

    def test_unknown_metadata(self):
        catalog, log, _, seg = self.world()
        universe = UserUniverse(
            warm={1, 2, 3},
            cold=set(),
            demographics={u: Demographics() for u in (1, 2, 3)},
        )
        profile = describe_segment(0, seg, universe, log, catalog)
        assert profile.country == "unknown" and profile.age_class == "unknown"


class TestSerialization:
    def build(self):
        rng = np.random.default_rng(0)
        catalog, log = tiny_world()
        users = EmbeddingTable([1, 2, 3], rng.standard_normal((3, 2)))
        return build_segmentation(users, 2, log, catalog, k_items=3, seed=0)

    def test_roundtrip_lossless(self, tmp_path):
        seg = self.build()
        # snap to float32 so the container's f32 centroids roundtrip exactly
        seg.centroids = seg.centroids.astype(np.float32).astype(np.float64)
        path = tmp_path / "s.seg"
        save_segmentation(seg, path)
        loaded = load_segmentation(path)
        assert np.array_equal(loaded.centroids, seg.centroids)
        assert loaded.assignment == seg.assignment
        assert loaded.top_items == seg.top_items
        assert loaded.global_top == seg.global_top
        assert loaded.metric == seg.metric

    def test_truncated_rejected(self, tmp_path):
        seg = self.build()
        path = tmp_path / "s.seg"
        save_segmentation(seg, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(SegmentationFormatError):
            load_segmentation(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "s.seg"
        save_segmentation(self.build(), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(SegmentationFormatError):
            load_segmentation(path)

    def test_text_export(self, tmp_path):
        seg = self.build()
        path = tmp_path / "s.txt"
        export_segmentation_text(seg, path)
        text = path.read_text()
        assert text.startswith("k\t2\td\t2")
        assert "assign\t1\t" in text

    def test_validate_flags_empty_segment(self):
        seg = Segmentation(centroids=np.zeros((2, 2)), assignment={1: 0})
        with pytest.raises(ValidationError):
            seg.validate()
