from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coldrec.core import Demographics, EmbeddingTable, UserUniverse, ValidationError
from coldrec.events import Event
from coldrec.features import (
    ChannelSpec,
    GroupEmbeddings,
    LeakageError,
    age_class,
    assemble_features,
    fit_group_embeddings,
)


class TestAgeClass:
    @pytest.mark.parametrize(
        "age,expected",
        [
            (30, "25-34"),
            (18, "18-24"),
            (None, "unknown"),
            (17, "<18"),
            (24, "18-24"),
            (25, "25-34"),
            (35, "35-49"),
            (49, "35-49"),
            (50, "50+"),
            (0, "<18"),
            (99, "50+"),
        ],
    )
    def test_buckets(self, age, expected):
        assert age_class(age) == expected


class TestChannelSpec:
    def test_default_dimension_arithmetic(self):
        spec = ChannelSpec(dim=128)
        assert len(spec.channels) == 21  # 5 signals x 4 entities + onboarding
        assert spec.n_blocks == 23
        assert spec.n_scalars == 27
        assert spec.total_dim == 23 * 128 + 27 == 2971

    def test_manifest_roundtrip(self, tmp_path):
        spec = ChannelSpec(dim=16)
        path = tmp_path / "spec.json"
        spec.save(path)
        loaded = ChannelSpec.load(path)
        assert loaded == spec

    def test_duplicate_channels_rejected(self):
        with pytest.raises(ValidationError):
            ChannelSpec(dim=4, channels=(("stream", "track"), ("stream", "track")))


class TestGroupEmbeddings:
    def universe(self):
        demo = {
            1: Demographics("FR", 20),
            2: Demographics("FR", 21),
            3: Demographics("BR", 40),
        }
        return UserUniverse({1, 2, 3}, set(), demo)

    def test_country_means(self):
        table = EmbeddingTable.from_dict({1: [1.0, 0.0], 2: [3.0, 0.0], 3: [0.0, 8.0]})
        groups = fit_group_embeddings(self.universe(), table, min_group_size=2)
        vec, fb = groups.country_vector("FR")
        assert np.allclose(vec, [2.0, 0.0]) and not fb

    def test_small_group_falls_back_to_global_mean(self):
        table = EmbeddingTable.from_dict({1: [1.0, 0.0], 2: [3.0, 0.0], 3: [0.0, 8.0]})
        groups = fit_group_embeddings(self.universe(), table, min_group_size=2)
        vec, fb = groups.country_vector("BR")  # single member -> fallback
        assert fb and np.allclose(vec, table.vectors.mean(axis=0))

    def test_absent_country_falls_back(self):
        table = EmbeddingTable.from_dict({1: [1.0, 0.0], 2: [3.0, 0.0], 3: [0.0, 8.0]})
        groups = fit_group_embeddings(self.universe(), table, min_group_size=2)
        vec, fb = groups.country_vector("JP")
        assert fb and np.allclose(vec, table.vectors.mean(axis=0))

    def test_single_age_class_equals_global_mean(self):
        demo = {u: Demographics("FR", 20 + u) for u in (1, 2, 3)}
        universe = UserUniverse({1, 2, 3}, set(), demo)
        table = EmbeddingTable.from_dict({1: [1.0], 2: [2.0], 3: [3.0]})
        groups = fit_group_embeddings(universe, table, min_group_size=3)
        vec, fb = groups.age_vector("18-24")
        assert not fb and np.allclose(vec, [2.0])

    def test_json_roundtrip(self, tmp_path):
        table = EmbeddingTable.from_dict({1: [1.0, 0.0], 2: [3.0, 0.0], 3: [0.0, 8.0]})
        groups = fit_group_embeddings(self.universe(), table, min_group_size=2)
        groups.save(tmp_path / "g.json")
        loaded = GroupEmbeddings.load(tmp_path / "g.json")
        assert np.array_equal(loaded.fallback, groups.fallback)
        assert set(loaded.country) == set(groups.country)


def make_fixture(dim=2):
    tracks = EmbeddingTable.from_dict({1: [1.0, 0.0], 2: [0.0, 1.0], 3: [1.0, 1.0]})
    artists = EmbeddingTable.from_dict({10: [0.5, 0.5]})
    tables = {
        "track": tracks,
        "artist": artists,
        "album": EmbeddingTable.empty(dim),
        "playlist": EmbeddingTable.empty(dim),
    }
    groups = GroupEmbeddings(
        country={"FR": np.array([0.2, 0.2])},
        age={"18-24": np.array([0.3, 0.3])},
        fallback=np.array([0.1, 0.1]),
    )
    spec = ChannelSpec(dim=dim)
    return tables, groups, spec


class TestAssembleFeatures:
    def test_zero_interactions_demographics_only(self):
        tables, groups, spec = make_fixture()
        fv = assemble_features(
            1, [], 0, tables, groups, spec, Demographics("FR", 20)
        )
        assert fv.values.shape == (spec.total_dim,)
        d = spec.dim
        interaction_part = fv.values[: len(spec.channels) * d]
        assert np.all(interaction_part == 0.0)
        country_block = fv.values[len(spec.channels) * d : (len(spec.channels) + 1) * d]
        assert np.allclose(country_block, [0.2, 0.2])
        scalars = fv.values[-spec.n_scalars :]
        names = spec.scalar_names
        assert scalars[names.index("no_interactions")] == 1.0
        assert scalars[names.index("age_norm")] == pytest.approx(0.2)

    def test_single_streamed_track_block_is_its_vector(self):
        tables, groups, spec = make_fixture()
        events = [Event(1, 5, "stream", "track", 2, 1)]
        fv = assemble_features(1, events, 5, tables, groups, spec, Demographics("FR", 20))
        idx = spec.channels.index(("stream", "track"))
        block = fv.values[idx * spec.dim : (idx + 1) * spec.dim]
        assert np.allclose(block, [0.0, 1.0])
        scalars = fv.values[-spec.n_scalars :]
        assert scalars[spec.scalar_names.index("count:stream:track")] == pytest.approx(np.log1p(1))
        assert scalars[spec.scalar_names.index("no_interactions")] == 0.0

    def test_count_weighted_channel_mean(self):
        tables, groups, spec = make_fixture()
        events = [
            Event(1, 0, "stream", "track", 1, 3),
            Event(1, 0, "stream", "track", 2, 1),
        ]
        fv = assemble_features(1, events, 0, tables, groups, spec, Demographics("FR", 20))
        idx = spec.channels.index(("stream", "track"))
        block = fv.values[idx * spec.dim : (idx + 1) * spec.dim]
        assert np.allclose(block, [0.75, 0.25])

    def test_event_after_registration_day_is_leakage(self):
        tables, groups, spec = make_fixture()
        with pytest.raises(LeakageError):
            assemble_features(
                1,
                [Event(1, 6, "stream", "track", 1, 1)],
                5,
                tables,
                groups,
                spec,
                Demographics("FR", 20),
            )

    def test_event_before_registration_day_rejected(self):
        tables, groups, spec = make_fixture()
        with pytest.raises(ValidationError):
            assemble_features(
                1,
                [Event(1, 4, "stream", "track", 1, 1)],
                5,
                tables,
                groups,
                spec,
                Demographics("FR", 20),
            )

    def test_unknown_demographics_set_indicator_bits(self):
        tables, groups, spec = make_fixture()
        fv = assemble_features(1, [], 0, tables, groups, spec, Demographics())
        scalars = fv.values[-spec.n_scalars :]
        names = spec.scalar_names
        assert scalars[names.index("age_unknown")] == 1.0
        assert scalars[names.index("country_unknown")] == 1.0
        assert scalars[names.index("country_fallback")] == 1.0
        assert scalars[names.index("age_fallback")] == 1.0

    def test_dimension_constant_across_users(self):
        tables, groups, spec = make_fixture()
        dims = set()
        for events in ([], [Event(1, 0, "stream", "track", 1, 4)]):
            fv = assemble_features(1, events, 0, tables, groups, spec, Demographics("FR", 20))
            dims.add(fv.values.shape)
        assert dims == {(spec.total_dim,)}

    def test_onboarding_channel(self):
        tables, groups, spec = make_fixture()
        events = [Event(1, 0, "onboarding", "artist", 10, 1)]
        fv = assemble_features(1, events, 0, tables, groups, spec, Demographics("FR", 20))
        idx = spec.channels.index(("onboarding", "artist"))
        block = fv.values[idx * spec.dim : (idx + 1) * spec.dim]
        assert np.allclose(block, [0.5, 0.5])

    @given(st.randoms(use_true_random=False))
    @settings(max_examples=25, deadline=None)
    def test_event_order_free(self, rnd):
        tables, groups, spec = make_fixture()
        events = [
            Event(1, 0, "stream", "track", 1, 2),
            Event(1, 0, "stream", "track", 2, 1),
            Event(1, 0, "skip", "track", 3, 1),
            Event(1, 0, "favorite", "artist", 10, 1),
            Event(1, 0, "stream", "track", 1, 1),
        ]
        base = assemble_features(1, events, 0, tables, groups, spec, Demographics("FR", 20))
        shuffled = list(events)
        rnd.shuffle(shuffled)
        other = assemble_features(1, shuffled, 0, tables, groups, spec, Demographics("FR", 20))
        assert np.array_equal(base.values, other.values)

    def test_duplicates_change_counts_not_length(self):
        tables, groups, spec = make_fixture()
        once = [Event(1, 0, "stream", "track", 1, 1)]
        twice = once + [Event(1, 0, "stream", "track", 1, 1)]
        a = assemble_features(1, once, 0, tables, groups, spec, Demographics("FR", 20))
        b = assemble_features(1, twice, 0, tables, groups, spec, Demographics("FR", 20))
        assert a.values.shape == b.values.shape
        idx = spec.scalar_names.index("count:stream:track")
        assert b.values[-spec.n_scalars + idx] > a.values[-spec.n_scalars + idx]

    def test_wrong_user_event_rejected(self):
        tables, groups, spec = make_fixture()
        with pytest.raises(ValidationError):
            assemble_features(
                1, [Event(2, 0, "stream", "track", 1, 1)], 0, tables, groups, spec,
                Demographics("FR", 20),
            )

    def test_dim_mismatch_rejected(self):
        tables, groups, _ = make_fixture()
        spec = ChannelSpec(dim=3)
        with pytest.raises(ValidationError):
            assemble_features(1, [], 0, tables, groups, spec, Demographics("FR", 20))
