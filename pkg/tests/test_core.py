from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from coldrec.core import (
    Catalog,
    Demographics,
    EmbeddingTable,
    TrackMeta,
    UserUniverse,
    ValidationError,
    ZeroVectorWarning,
    cosine_sim,
    mean_embedding,
    top_k_by_similarity,
)


class TestCosine:
    def test_identical_unit_vectors(self):
        assert cosine_sim([1, 0], [1, 0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_sim([1, 0], [0, 1]) == pytest.approx(0.0)

    def test_analytic_45_degrees(self):
        assert cosine_sim([1, 0], [1, 1]) == pytest.approx(1 / np.sqrt(2), abs=1e-12)

    def test_zero_vector_warns_and_returns_zero(self):
        with pytest.warns(ZeroVectorWarning):
            assert cosine_sim([0, 0], [1, 2]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            cosine_sim([1, 0], [1, 0, 0])

    @given(
        hnp.arrays(np.float64, 4, elements=st.floats(-10, 10)),
        hnp.arrays(np.float64, 4, elements=st.floats(-10, 10)),
        st.floats(1e-3, 1e3),
    )
    @settings(max_examples=200)
    def test_invariant_under_positive_scaling(self, a, b, scale):
        if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
            return
        assert abs(cosine_sim(a * scale, b) - cosine_sim(a, b)) < 1e-9
        assert abs(cosine_sim(a, b * scale) - cosine_sim(a, b)) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal(8), rng.standard_normal(8)
        assert cosine_sim(a, b) == cosine_sim(b, a)


class TestMeanEmbedding:
    def table(self):
        return EmbeddingTable.from_dict({1: [2.0, 0.0], 2: [0.0, 2.0], 3: [3.0, 4.0]})

    def test_two_rows(self):
        res = mean_embedding([1, 2], self.table())
        assert np.allclose(res.vector, [1.0, 1.0])
        assert not res.is_null

    def test_empty_ids_null_flag(self):
        res = mean_embedding([], self.table())
        assert res.is_null
        assert np.array_equal(res.vector, np.zeros(2))

    def test_singleton_identity(self):
        res = mean_embedding([3], self.table())
        assert np.array_equal(res.vector, [3.0, 4.0])

    def test_missing_ids_skipped_and_counted(self):
        res = mean_embedding([1, 999], self.table())
        assert np.allclose(res.vector, [2.0, 0.0])
        assert res.n_missing == 1

    def test_all_missing_is_null(self):
        res = mean_embedding([7, 8], self.table())
        assert res.is_null and res.n_missing == 2

    def test_duplicates_are_count_weighted(self):
        res = mean_embedding([1, 1, 1, 2], self.table())
        assert np.allclose(res.vector, [1.5, 0.5])

    @given(st.permutations(list(range(1, 4)) * 2))
    def test_order_free(self, ids):
        base = mean_embedding([1, 1, 2, 2, 3, 3], self.table())
        res = mean_embedding(ids, self.table())
        assert np.array_equal(res.vector, base.vector)


class TestTopK:
    def test_basic(self):
        table = EmbeddingTable.from_dict({1: [1.0, 0.0], 2: [0.0, 1.0]})
        assert top_k_by_similarity([1, 0], table, 1)[0][0] == 1

    def test_symmetric_tie_broken_by_id(self):
        table = EmbeddingTable.from_dict({2: [0.0, 1.0], 1: [1.0, 0.0]})
        result = top_k_by_similarity([1, 1], table, 2)
        assert [t for t, _ in result] == [1, 2]

    def test_exclude_never_returned(self):
        table = EmbeddingTable.from_dict({1: [1.0, 0.0], 2: [0.9, 0.1], 3: [0.0, 1.0]})
        result = top_k_by_similarity([1, 0], table, 3, exclude={1})
        assert 1 not in [t for t, _ in result]

    def test_empty_table(self):
        assert top_k_by_similarity([1.0], EmbeddingTable.empty(1), 3) == []

    def test_k_below_one_rejected(self):
        with pytest.raises(ValidationError):
            top_k_by_similarity([1.0], EmbeddingTable.empty(1), 0)

    def _brute_force(self, query, table, k, exclude=()):
        query = np.asarray(query, dtype=np.float64)
        scored = []
        for i, eid in enumerate(table.ids):
            if int(eid) in exclude:
                continue
            row = table.vectors[i]
            denom = np.linalg.norm(query) * np.linalg.norm(row)
            scored.append((int(eid), float(row @ query / denom)))
        scored.sort(key=lambda kv: (-kv[1], kv[0]))
        return scored[:k]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        table = EmbeddingTable(np.arange(100), rng.standard_normal((100, 8)))
        query = rng.standard_normal(8)
        got = top_k_by_similarity(query, table, 10)
        want = self._brute_force(query, table, 10)
        assert [t for t, _ in got] == [t for t, _ in want]
        assert np.allclose([s for _, s in got], [s for _, s in want])

    @given(st.integers(1, 30), st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_oracle_equivalence_all_k(self, k, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(1, 40)
        table = EmbeddingTable(np.arange(n), rng.standard_normal((int(n), 4)))
        query = rng.standard_normal(4)
        got = top_k_by_similarity(query, table, k)
        want = self._brute_force(query, table, k)
        assert [t for t, _ in got] == [t for t, _ in want]

    def test_dot_metric(self):
        table = EmbeddingTable.from_dict({1: [2.0, 0.0], 2: [0.5, 0.0]})
        # cosine ties these rows; inner product prefers the longer one
        result = top_k_by_similarity([1, 0], table, 2, metric="dot")
        assert result[0] == (1, 4.0) or result[0][0] == 1


class TestDomainTypes:
    def test_catalog_rank_bijection_enforced(self):
        with pytest.raises(ValidationError):
            Catalog({1: TrackMeta(1, 1, 1), 2: TrackMeta(1, 1, 1)})

    def test_catalog_reverse_indexes(self):
        cat = Catalog(
            {
                1: TrackMeta(artist_id=10, album_id=20, rank=1),
                2: TrackMeta(artist_id=10, album_id=21, rank=2),
            }
        )
        assert cat.artist_tracks(10) == (1, 2)
        assert cat.album_tracks(21) == (2,)
        assert cat.playlist_tracks(999) == ()

    def test_playlist_unknown_track_rejected(self):
        with pytest.raises(ValidationError):
            Catalog({1: TrackMeta(1, 1, 1)}, playlists={5: (1, 2)})

    def test_universe_disjoint(self):
        with pytest.raises(ValidationError):
            UserUniverse({1}, {1}, {1: Demographics()})

    def test_universe_requires_demographics(self):
        with pytest.raises(ValidationError):
            UserUniverse({1}, {2}, {1: Demographics()})

    def test_embedding_table_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            EmbeddingTable([1], np.array([[np.inf, 0.0]]))

    def test_embedding_table_rejects_duplicates(self):
        with pytest.raises(ValidationError):
            EmbeddingTable([1, 1], np.zeros((2, 2)))
