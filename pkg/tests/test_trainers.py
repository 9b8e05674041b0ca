from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

import coldrec.trainers as trainers
from coldrec.core import Catalog, TrackMeta, ValidationError
from coldrec.events import Event, InteractionLog, UnknownSignalError
from coldrec.trainers import (
    AffinityMatrix,
    AlsConfig,
    CooccurrenceCounts,
    RankDeficiencyWarning,
    SppmiMatrix,
    build_affinity_matrix,
    build_sppmi,
    count_cooccurrences,
    derive_entity_embedding,
    train_als,
    train_svd_embeddings,
    warm_user_embedding_from_history,
)


def small_catalog():
    return Catalog(
        {
            1: TrackMeta(artist_id=10, album_id=20, rank=1),
            2: TrackMeta(artist_id=10, album_id=20, rank=2),
            3: TrackMeta(artist_id=11, album_id=21, rank=3),
        },
        playlists={30: (1, 3)},
    )


class TestAffinity:
    def test_stream_count_weighting(self):
        log = InteractionLog([Event(1, 0, "stream", "track", 1, 3)])
        m = build_affinity_matrix(log, small_catalog(), {"stream": 1.0})
        assert m.score(1, 1) == 3.0

    def test_stream_plus_favorite(self):
        log = InteractionLog(
            [
                Event(1, 0, "stream", "track", 1, 2),
                Event(1, 0, "favorite", "track", 1, 1),
            ]
        )
        m = build_affinity_matrix(log, small_catalog(), {"stream": 1.0, "favorite": 2.0})
        assert m.score(1, 1) == 4.0

    def test_album_favorite_reaches_member_tracks(self):
        log = InteractionLog([Event(1, 0, "favorite", "album", 20, 1)])
        m = build_affinity_matrix(log, small_catalog(), {"favorite": 2.0})
        assert m.score(1, 1) == 2.0 and m.score(1, 2) == 2.0 and m.score(1, 3) == 0.0

    def test_artist_favorite_indicator_not_additive(self):
        # favoriting track and its artist still counts once
        log = InteractionLog(
            [
                Event(1, 0, "favorite", "track", 1, 1),
                Event(1, 0, "favorite", "artist", 10, 1),
            ]
        )
        m = build_affinity_matrix(log, small_catalog(), {"favorite": 2.0})
        assert m.score(1, 1) == 2.0

    def test_empty_log(self):
        m = build_affinity_matrix(InteractionLog(), small_catalog())
        assert m.nnz == 0

    def test_unknown_signal_weight_rejected(self):
        with pytest.raises(UnknownSignalError):
            build_affinity_matrix(InteractionLog(), small_catalog(), {"bogus": 1.0})

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError):
            build_affinity_matrix(InteractionLog(), small_catalog(), {"stream": -1.0})


class TestAls:
    def planted_rank1(self):
        # preference block: users 0..11 x tracks 0..13 within a 20x20 matrix
        scores = np.zeros((20, 20))
        scores[:12, :14] = 1.0
        m = sp.csr_matrix(scores)
        return AffinityMatrix(np.arange(20), np.arange(100, 120), m)

    def test_rank1_recovery(self):
        m = self.planted_rank1()
        cfg = AlsConfig(dim=1, l2=1e-6, alpha=1e4, iterations=30, seed=0)
        users, tracks, _ = train_als(m, cfg)
        recon = users.vectors @ tracks.vectors.T
        p = (m.matrix.toarray() > 0).astype(float)
        assert np.max(np.abs(recon - p)) < 1e-3

    def test_objective_monotone_every_half_step(self):
        rng = np.random.default_rng(1)
        dense = (rng.random((15, 12)) < 0.3) * rng.integers(1, 5, (15, 12))
        m = AffinityMatrix(np.arange(15), np.arange(12), sp.csr_matrix(dense.astype(float)))
        _, _, history = train_als(m, AlsConfig(dim=3, l2=0.1, alpha=10, iterations=10, seed=2))
        assert len(history) == 21  # initial value + two half-steps per iteration
        for prev, cur in zip(history, history[1:]):
            assert cur <= prev * (1 + 1e-9) + 1e-9

    def test_one_by_one_preference_recovered(self):
        m = AffinityMatrix([1], [2], sp.csr_matrix(np.array([[5.0]])))
        cfg = AlsConfig(dim=1, l2=0.1, alpha=40.0, iterations=50, seed=0)
        users, tracks, _ = train_als(m, cfg)
        product = float(users.get(1) @ tracks.get(2))
        assert product == pytest.approx(1.0, abs=1e-3)

    def test_one_by_one_closed_form_fixed_point(self):
        # any nonzero 1-d alternating fixed point satisfies x*y = 1 - l2/c;
        # a larger l2/c ratio makes the scale imbalance decay fast enough to
        # observe the limit
        score, l2, alpha = 5.0, 0.5, 2.0
        m = AffinityMatrix([1], [2], sp.csr_matrix(np.array([[score]])))
        cfg = AlsConfig(dim=1, l2=l2, alpha=alpha, iterations=400, seed=0)
        users, tracks, _ = train_als(m, cfg)
        product = float(users.get(1) @ tracks.get(2))
        expected = 1.0 - l2 / (1.0 + alpha * score)
        assert product == pytest.approx(expected, abs=1e-6)

    def test_deterministic_given_seed(self):
        m = self.planted_rank1()
        cfg = AlsConfig(dim=2, iterations=3, seed=7)
        u1, t1, h1 = train_als(m, cfg)
        u2, t2, h2 = train_als(m, cfg)
        assert u1.equals(u2) and t1.equals(t2) and h1 == h2

    def test_empty_matrix_rejected(self):
        m = AffinityMatrix([1], [2], sp.csr_matrix((1, 1)))
        with pytest.raises(ValidationError):
            train_als(m, AlsConfig(dim=1))

    def test_dim_exceeding_matrix_rejected(self):
        m = AffinityMatrix([1], [2], sp.csr_matrix(np.array([[5.0]])))
        with pytest.raises(ValidationError):
            train_als(m, AlsConfig(dim=2))


class TestSppmi:
    def test_hand_evaluated_cell(self):
        # c_ij=2, c_i=4, c_j=2, N=8 -> log 2
        counts = CooccurrenceCounts.from_pair_counts(
            [1, 2, 3], {(1, 2): 2.0, (1, 3): 2.0, (3, 3): 0.0}
        )
        assert counts.total == 8.0
        assert counts.marginals.tolist() == [4.0, 2.0, 2.0]
        s = build_sppmi(counts, shift_k=1.0)
        i, j = 0, 1  # track ids 1 and 2
        assert s.matrix[i, j] == pytest.approx(np.log(2.0), abs=1e-12)

    def test_cells_below_shift_dropped(self):
        counts = CooccurrenceCounts.from_pair_counts([1, 2], {(1, 2): 1.0})
        # PMI = log(2*1/(1*1)) = log 2 < log 4 -> dropped entirely
        s = build_sppmi(counts, shift_k=4.0)
        assert s.matrix.nnz == 0

    def test_diagonal_only_counts(self):
        counts = CooccurrenceCounts.from_pair_counts(
            [1, 2], {(1, 1): 4.0, (2, 2): 1.0}
        )
        s = build_sppmi(counts, shift_k=1.0)
        n = counts.total  # 5
        expected_11 = max(np.log(n * 4.0 / 16.0), 0.0)
        expected_22 = max(np.log(n * 1.0 / 1.0), 0.0)
        assert s.matrix[0, 0] == pytest.approx(expected_11, abs=1e-12)
        assert s.matrix[1, 1] == pytest.approx(expected_22, abs=1e-12)

    def test_playlist_counting(self):
        counts = count_cooccurrences([(1, 2, 3), (1, 2), (2, 2)])
        assert counts.matrix[0, 1] == 2.0  # pair (1,2) in two collections
        assert counts.matrix[1, 0] == 2.0
        assert counts.matrix[1, 1] == 0.0  # duplicates within one collection ignored

    @given(st.lists(st.lists(st.integers(0, 8), min_size=2, max_size=5), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_sppmi_nonnegative_and_symmetric(self, collections):
        collections = [c for c in collections if len(set(c)) >= 2]
        if not collections:
            return
        counts = count_cooccurrences(collections)
        s = build_sppmi(counts, shift_k=1.0)
        assert (s.matrix.data >= 0).all() if s.matrix.nnz else True
        assert (abs(s.matrix - s.matrix.T)).nnz == 0

    def test_asymmetric_counts_rejected(self):
        bad = sp.csr_matrix(np.array([[0.0, 1.0], [2.0, 0.0]]))
        with pytest.raises(ValidationError):
            CooccurrenceCounts([1, 2], bad)


class TestSvdEmbeddings:
    def as_sppmi(self, dense, ids=None):
        dense = np.asarray(dense, dtype=float)
        ids = np.arange(len(dense)) if ids is None else np.asarray(ids)
        return SppmiMatrix(ids, sp.csr_matrix(dense))

    def test_diagonal_matrix_exact(self):
        s = self.as_sppmi(np.diag([4.0, 1.0]))
        table = train_svd_embeddings(s, d=2)
        assert np.allclose(table.vectors, [[2.0, 0.0], [0.0, 1.0]], atol=1e-12)

    def test_exact_rank_r_gram_reconstruction(self):
        rng = np.random.default_rng(5)
        b = np.abs(rng.standard_normal((30, 3)))
        s_dense = b @ b.T  # symmetric PSD, exactly rank 3
        table = train_svd_embeddings(self.as_sppmi(s_dense), d=3)
        gram = table.vectors @ table.vectors.T
        assert np.linalg.norm(gram - s_dense) < 1e-6

    def test_gram_matches_dense_svd_oracle_on_clustered_sppmi(self):
        # playlist-style clustered co-occurrence: the top of the spectrum is
        # positive, which the one-sided U sqrt(Sigma) convention requires
        rng = np.random.default_rng(11)
        tracks = list(range(30))
        playlists = []
        for block in range(5):
            members = tracks[block * 6 : (block + 1) * 6]
            for _ in range(8):
                playlists.append(rng.choice(members, size=4, replace=False).tolist())
        counts = count_cooccurrences(playlists)
        s = build_sppmi(counts, shift_k=1.0)
        dense = s.matrix.toarray()
        d = 4
        eigvals = np.linalg.eigvalsh(dense)
        svals = np.linalg.svd(dense, compute_uv=False)
        assert eigvals[-d] > svals[d]  # top-d spectrum is positive with margin
        u, sig, vt = np.linalg.svd(dense)
        best_rank_d = u[:, :d] @ np.diag(sig[:d]) @ vt[:d]
        table = train_svd_embeddings(s, d=d)
        gram = table.vectors @ table.vectors.T
        assert np.linalg.norm(gram - best_rank_d) < 1e-6

    def test_d_zero_rejected(self):
        with pytest.raises(ValidationError):
            train_svd_embeddings(self.as_sppmi(np.eye(3)), d=0)

    def test_d_exceeding_order_rejected(self):
        with pytest.raises(ValidationError):
            train_svd_embeddings(self.as_sppmi(np.eye(3)), d=4)

    def test_rank_deficiency_pads_with_zeros_and_warns(self):
        s = self.as_sppmi(np.outer([1.0, 2.0, 0.5], [1.0, 2.0, 0.5]))
        with pytest.warns(RankDeficiencyWarning):
            table = train_svd_embeddings(s, d=3)
        assert np.allclose(table.vectors[:, 1:], 0.0)

    def test_sign_canonicalization(self):
        s = self.as_sppmi(np.diag([4.0, 1.0]))
        table = train_svd_embeddings(s, d=2)
        for j in range(2):
            col = table.vectors[:, j]
            assert col[np.argmax(np.abs(col))] >= 0

    def test_scaling_variants(self):
        s = self.as_sppmi(np.diag([4.0, 1.0]))
        u = train_svd_embeddings(s, d=2, scaling="u")
        us = train_svd_embeddings(s, d=2, scaling="us")
        assert np.allclose(u.vectors, np.eye(2))
        assert np.allclose(us.vectors, np.diag([4.0, 1.0]))

    def test_randomized_path_deterministic_and_accurate(self, monkeypatch):
        rng = np.random.default_rng(3)
        b = np.abs(rng.standard_normal((40, 4)))
        s = self.as_sppmi(b @ b.T)
        monkeypatch.setattr(trainers, "_DENSE_CUTOFF", 10)
        t1 = train_svd_embeddings(s, d=4, seed=9)
        t2 = train_svd_embeddings(s, d=4, seed=9)
        assert t1.equals(t2)
        gram = t1.vectors @ t1.vectors.T
        assert np.linalg.norm(gram - (b @ b.T)) < 1e-6


class TestDerivedEmbeddings:
    def table(self):
        from coldrec.core import EmbeddingTable

        return EmbeddingTable.from_dict({1: [1.0, 0.0], 2: [0.0, 1.0], 3: [4.0, 4.0]})

    def test_album_mean(self):
        res = derive_entity_embedding("album", 20, self.table(), small_catalog())
        assert np.allclose(res.vector, [0.5, 0.5])

    def test_single_track_playlist(self):
        cat = Catalog(
            {1: TrackMeta(10, 20, 1), 2: TrackMeta(10, 20, 2), 3: TrackMeta(11, 21, 3)},
            playlists={30: (3,)},
        )
        res = derive_entity_embedding("playlist", 30, self.table(), cat)
        assert np.allclose(res.vector, [4.0, 4.0])

    def test_artist_without_embedded_tracks_is_null(self):
        from coldrec.core import EmbeddingTable

        table = EmbeddingTable.from_dict({3: [4.0, 4.0]})
        res = derive_entity_embedding("artist", 10, table, small_catalog())
        assert res.is_null and np.array_equal(res.vector, np.zeros(2))


class TestWarmUserEmbedding:
    def test_unit_counts(self):
        log = InteractionLog(
            [Event(1, 0, "stream", "track", 1, 1), Event(1, 0, "stream", "track", 2, 1)]
        )
        res = warm_user_embedding_from_history(1, log, TestDerivedEmbeddings().table())
        assert np.allclose(res.vector, [0.5, 0.5])

    def test_count_weighted(self):
        from coldrec.core import EmbeddingTable

        table = EmbeddingTable.from_dict({1: [2.0, 0.0], 2: [0.0, 2.0]})
        log = InteractionLog(
            [Event(1, 0, "stream", "track", 1, 3), Event(1, 0, "stream", "track", 2, 1)]
        )
        res = warm_user_embedding_from_history(1, log, table)
        assert np.allclose(res.vector, [1.5, 0.5])

    def test_unweighted_flag(self):
        from coldrec.core import EmbeddingTable

        table = EmbeddingTable.from_dict({1: [2.0, 0.0], 2: [0.0, 2.0]})
        log = InteractionLog(
            [Event(1, 0, "stream", "track", 1, 3), Event(1, 0, "stream", "track", 2, 1)]
        )
        res = warm_user_embedding_from_history(1, log, table, count_weighted=False)
        assert np.allclose(res.vector, [1.0, 1.0])

    def test_empty_history_null(self):
        res = warm_user_embedding_from_history(
            9, InteractionLog(), TestDerivedEmbeddings().table()
        )
        assert res.is_null
