"""Fixed-size dense input vectors from demographics and registration-day
interactions, built identically for warm (training) and cold (inference)
users.

Layout, in spec order: one mean-embedding block per interaction channel
(signal x entity level, plus the onboarding-artist channel), the country
and age group-embedding blocks, then the scalar tail. Scalars are the
log1p event count of each channel (zero count doubles as the channel's
missing marker), the normalized age, and five indicator bits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Demographics, EmbeddingTable, UserUniverse, ValidationError, mean_embedding
from .events import Event

AGE_CLASSES = ("<18", "18-24", "25-34", "35-49", "50+", "unknown")

_CHANNEL_SIGNALS = ("stream", "skip", "ban", "search", "favorite")
_CHANNEL_LEVELS = ("track", "artist", "album", "playlist")

DEFAULT_CHANNELS: tuple[tuple[str, str], ...] = tuple(
    (s, l) for s in _CHANNEL_SIGNALS for l in _CHANNEL_LEVELS
) + (("onboarding", "artist"),)

_INDICATORS = (
    "age_unknown",
    "country_unknown",
    "country_fallback",
    "age_fallback",
    "no_interactions",
)


class LeakageError(ValueError):
    """A feature event is dated after the user's registration day."""


def age_class(age: int | None) -> str:
    """Bucket an age in years into the fixed age classes; total function."""
    if age is None:
        return "unknown"
    if age < 18:
        return "<18"
    if age <= 24:
        return "18-24"
    if age <= 34:
        return "25-34"
    if age <= 49:
        return "35-49"
    return "50+"


@dataclass(frozen=True)
class ChannelSpec:
    """Versioned channel layout; the total dimension is data-independent."""

    dim: int
    channels: tuple[tuple[str, str], ...] = DEFAULT_CHANNELS
    version: str = "cs-1"

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")
        if len(set(self.channels)) != len(self.channels):
            raise ValidationError("duplicate feature channels")

    @property
    def scalar_names(self) -> tuple[str, ...]:
        counts = tuple(f"count:{s}:{l}" for s, l in self.channels)
        return counts + ("age_norm",) + _INDICATORS

    @property
    def n_scalars(self) -> int:
        return len(self.channels) + 1 + len(_INDICATORS)

    @property
    def n_blocks(self) -> int:
        return len(self.channels) + 2  # + country, age

    @property
    def total_dim(self) -> int:
        return self.n_blocks * self.dim + self.n_scalars

    def to_manifest(self) -> str:
        payload = {
            "version": self.version,
            "dim": self.dim,
            "channels": [list(c) for c in self.channels],
            "scalars": list(self.scalar_names),
            "total_dim": self.total_dim,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "ChannelSpec":
        payload = json.loads(text)
        spec = cls(
            dim=payload["dim"],
            channels=tuple((s, l) for s, l in payload["channels"]),
            version=payload["version"],
        )
        if payload.get("total_dim") not in (None, spec.total_dim):
            raise ValidationError(
                f"manifest total_dim {payload['total_dim']} != computed {spec.total_dim}"
            )
        return spec

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_manifest(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ChannelSpec":
        return cls.from_manifest(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    spec_version: str


@dataclass
class GroupEmbeddings:
    """Country and age-class mean embeddings of warm users, with a global
    fallback for unknown or under-populated groups."""

    country: dict[str, np.ndarray]
    age: dict[str, np.ndarray]
    fallback: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.fallback)

    def country_vector(self, code: str | None) -> tuple[np.ndarray, bool]:
        """(vector, used_fallback); unknown codes use the global mean."""
        if code is not None and code in self.country:
            return self.country[code], False
        return self.fallback, True

    def age_vector(self, cls: str) -> tuple[np.ndarray, bool]:
        if cls in self.age:
            return self.age[cls], False
        return self.fallback, True

    def to_payload(self) -> dict:
        return {
            "country": {c: [float(v) for v in vec] for c, vec in sorted(self.country.items())},
            "age": {a: [float(v) for v in vec] for a, vec in sorted(self.age.items())},
            "fallback": [float(v) for v in self.fallback],
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "GroupEmbeddings":
        return cls(
            country={c: np.array(v, dtype=np.float64) for c, v in payload["country"].items()},
            age={a: np.array(v, dtype=np.float64) for a, v in payload["age"].items()},
            fallback=np.array(payload["fallback"], dtype=np.float64),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_payload(), sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "GroupEmbeddings":
        return cls.from_payload(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_group_embeddings(
    universe: UserUniverse,
    warm_table: EmbeddingTable,
    min_group_size: int = 10,
) -> GroupEmbeddings:
    """Per-group mean warm-user embeddings.

    Groups with fewer than ``min_group_size`` members map to the global
    mean, so single-user groups cannot leak an individual's taste.
    """
    warm = [u for u in sorted(universe.warm) if u in warm_table]
    if not warm:
        raise ValidationError("no warm users with embeddings")
    d = warm_table.dim
    total = np.zeros(d)
    by_country: dict[str, list[np.ndarray]] = {}
    by_age: dict[str, list[np.ndarray]] = {}
    for u in warm:
        vec = warm_table.get(u)
        total += vec
        demo = universe.demographics_of(u)
        if demo.country is not None:
            by_country.setdefault(demo.country, []).append(vec)
        cls = age_class(demo.age)
        if cls != "unknown":
            by_age.setdefault(cls, []).append(vec)
    fallback = total / len(warm)

    def reduce(groups: dict[str, list[np.ndarray]]) -> dict[str, np.ndarray]:
        out = {}
        for key in sorted(groups):
            vecs = groups[key]
            if len(vecs) >= min_group_size:
                out[key] = np.mean(vecs, axis=0)
        return out

    return GroupEmbeddings(country=reduce(by_country), age=reduce(by_age), fallback=fallback)


def assemble_features(
    user: int,
    events: Sequence[Event],
    registration_day: int,
    entity_tables: Mapping[str, EmbeddingTable],
    groups: GroupEmbeddings,
    spec: ChannelSpec,
    demographics: Demographics,
) -> FeatureVector:
    """Concatenate channel mean-embeddings, demographic blocks and scalars.

    Only events dated exactly on the registration day are admitted; a later
    event raises LeakageError (ground truth must never feed features).
    """
    for table in entity_tables.values():
        if table.dim != spec.dim:
            raise ValidationError(
                f"entity table dim {table.dim} != channel spec dim {spec.dim}"
            )
    if groups.dim != spec.dim:
        raise ValidationError(f"group embedding dim {groups.dim} != spec dim {spec.dim}")

    per_channel: dict[tuple[str, str], dict[int, int]] = {c: {} for c in spec.channels}
    for ev in events:
        if ev.user != user:
            raise ValidationError(f"event for user {ev.user} passed to user {user}")
        if ev.day > registration_day:
            raise LeakageError(
                f"user {user}: event on day {ev.day} is after registration day "
                f"{registration_day}"
            )
        if ev.day < registration_day:
            raise ValidationError(
                f"user {user}: event on day {ev.day} predates registration day "
                f"{registration_day}"
            )
        key = (ev.signal, ev.level)
        if key in per_channel:
            bucket = per_channel[key]
            bucket[ev.entity] = bucket.get(ev.entity, 0) + ev.count

    blocks: list[np.ndarray] = []
    counts: list[float] = []
    total_events = 0
    for key in spec.channels:
        bucket = per_channel[key]
        n_events = sum(bucket.values())
        total_events += n_events
        table = entity_tables.get(key[1])
        if n_events == 0 or table is None:
            blocks.append(np.zeros(spec.dim))
        else:
            ids: list[int] = []
            for ent in sorted(bucket):
                ids.extend([ent] * bucket[ent])
            blocks.append(mean_embedding(ids, table).vector)
        counts.append(np.log1p(float(n_events)))

    country_vec, country_fb = groups.country_vector(demographics.country)
    cls = age_class(demographics.age)
    age_vec, age_fb = groups.age_vector(cls) if cls != "unknown" else (groups.fallback, True)
    blocks.append(country_vec)
    blocks.append(age_vec)

    age_unknown = demographics.age is None
    country_unknown = demographics.country is None
    scalars = counts + [
        0.0 if age_unknown else min(max(demographics.age / 100.0, 0.0), 1.0),
        1.0 if age_unknown else 0.0,
        1.0 if country_unknown else 0.0,
        1.0 if country_fb else 0.0,
        1.0 if age_fb else 0.0,
        1.0 if total_events == 0 else 0.0,
    ]
    values = np.concatenate(blocks + [np.array(scalars)])
    assert values.shape == (spec.total_dim,)
    return FeatureVector(values=values, spec_version=spec.version)
