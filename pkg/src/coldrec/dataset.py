"""Dataset bundle container, directory loader/saver with a declarative
schema mapping, and a synthetic planted-preference generator for
desk-scale end-to-end experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    Catalog,
    Demographics,
    EmbeddingTable,
    TrackMeta,
    UserUniverse,
    ValidationError,
)
from .embio import read_embeddings, write_embeddings
from .events import Event, InteractionLog

_FORMAT_VERSION = 1

# default logical-name -> relative-path mapping; a bundle manifest may
# override any entry to adapt an external directory layout
_DEFAULT_FILES = {
    "tracks": "tracks.tsv",
    "playlists": "playlists.tsv",
    "users": "users.tsv",
    "history": "history.tsv",
    "features": "features.tsv",
    "ground_truth": "ground_truth.tsv",
}

# default logical-field -> column-name mapping per file
_DEFAULT_COLUMNS = {
    "tracks": {
        "track_id": "track_id",
        "artist_id": "artist_id",
        "album_id": "album_id",
        "rank": "rank",
        "genres": "genres",
    },
    "users": {
        "user_id": "user_id",
        "role": "role",
        "split": "split",
        "country": "country",
        "age": "age",
        "registration_day": "registration_day",
    },
    "events": {
        "user_id": "user_id",
        "day": "day",
        "signal": "signal",
        "level": "level",
        "entity_id": "entity_id",
        "count": "count",
    },
}


class BundleFormatError(Exception):
    """Bundle directory is missing files or malformed."""


@dataclass
class DatasetBundle:
    """Everything one offline experiment needs, in memory."""

    catalog: Catalog
    universe: UserUniverse
    registration_day: dict[int, int]
    history: InteractionLog  # warm users' full listening histories
    features_log: InteractionLog  # registration-day slices, warm and cold
    splits: dict[str, frozenset[int]]  # cold users: validation / test
    ground_truth: dict[int, frozenset[int]]
    track_embeddings: dict[str, EmbeddingTable]
    user_embeddings: dict[str, EmbeddingTable]  # warm users, per space
    min_truth_listens: int = 50

    @property
    def spaces(self) -> list[str]:
        return sorted(self.track_embeddings)

    def cold_split(self, name: str) -> frozenset[int]:
        if name not in self.splits:
            raise ValidationError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]

    def feature_events(self, user: int) -> tuple[Event, ...]:
        return self.features_log.for_user(user)

    def validate(self) -> None:
        """Check every bundle invariant; raises naming offending records."""
        self.catalog.validate()
        self.universe.validate()
        cold = self.universe.cold
        split_union: set[int] = set()
        for name, users in sorted(self.splits.items()):
            extra = users - cold
            if extra:
                raise ValidationError(
                    f"split {name!r} contains non-cold users {sorted(extra)[:10]}"
                )
            overlap = split_union & users
            if overlap:
                raise ValidationError(
                    f"users in multiple splits: {sorted(overlap)[:10]}"
                )
            split_union |= users
        unsplit = cold - split_union
        if unsplit:
            raise ValidationError(f"cold users missing a split: {sorted(unsplit)[:10]}")

        tracks = self.catalog.meta
        bad_truth = [
            (u, t)
            for u, ts in sorted(self.ground_truth.items())
            for t in sorted(ts)
            if t not in tracks
        ]
        if bad_truth:
            raise ValidationError(f"ground truth references unknown tracks: {bad_truth[:10]}")
        not_cold = sorted(set(self.ground_truth) - cold)
        if not_cold:
            raise ValidationError(f"ground truth for non-cold users: {not_cold[:10]}")
        thin = sorted(
            u for u, ts in self.ground_truth.items() if len(ts) < self.min_truth_listens
        )
        if thin:
            raise ValidationError(
                f"ground truth below {self.min_truth_listens} listens for users {thin[:10]}"
            )

        missing_users = [u for u in self.features_log.users()
                         if u not in self.registration_day]
        if missing_users:
            raise ValidationError(
                f"feature events for users without registration day: {missing_users[:10]}"
            )
        late = [
            (ev.user, ev.day)
            for ev in self.features_log
            if ev.day > self.registration_day[ev.user]
        ]
        if late:
            raise ValidationError(
                f"feature events after registration day (leakage): {late[:10]}"
            )
        early = [
            (ev.user, ev.day)
            for ev in self.features_log
            if ev.day < self.registration_day[ev.user]
        ]
        if early:
            raise ValidationError(
                f"feature events before registration day: {early[:10]}"
            )
        for log, name in ((self.history, "history"), (self.features_log, "features")):
            bad = [
                (ev.user, ev.entity)
                for ev in log
                if ev.level == "track" and ev.entity not in tracks
            ]
            if bad:
                raise ValidationError(f"{name} references unknown tracks: {bad[:10]}")

        for space in self.spaces:
            t_dim = self.track_embeddings[space].dim
            u_table = self.user_embeddings.get(space)
            if u_table is None:
                raise ValidationError(f"space {space!r} has no user embeddings")
            if u_table.dim != t_dim:
                raise ValidationError(
                    f"space {space!r}: user dim {u_table.dim} != track dim {t_dim}"
                )
            uncovered = sorted(u for u in self.universe.warm if u not in u_table)
            if uncovered:
                raise ValidationError(
                    f"space {space!r}: warm users without embeddings: {uncovered[:10]}"
                )


def bundles_equal(a: DatasetBundle, b: DatasetBundle) -> bool:
    if a.catalog.meta != b.catalog.meta or a.catalog.playlists != b.catalog.playlists:
        return False
    if (
        a.universe.warm != b.universe.warm
        or a.universe.cold != b.universe.cold
        or a.universe.demographics != b.universe.demographics
    ):
        return False
    if a.registration_day != b.registration_day or a.splits != b.splits:
        return False
    if a.ground_truth != b.ground_truth or a.min_truth_listens != b.min_truth_listens:
        return False
    if a.history.canonical_events() != b.history.canonical_events():
        return False
    if a.features_log.canonical_events() != b.features_log.canonical_events():
        return False
    if a.spaces != b.spaces:
        return False
    for space in a.spaces:
        if not a.track_embeddings[space].equals(b.track_embeddings[space]):
            return False
        if not a.user_embeddings[space].equals(b.user_embeddings[space]):
            return False
    return True


# ---------------------------------------------------------------------------
# directory save / load
# ---------------------------------------------------------------------------


def _fmt_opt(value) -> str:
    return "-" if value is None else str(value)


def _parse_opt(token: str) -> str | None:
    return None if token == "-" else token


def _write_tsv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")


def _read_tsv(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.exists():
        raise BundleFormatError(f"missing bundle file: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise BundleFormatError(f"empty bundle file: {path}")
    header = lines[0].split("\t")
    return header, [line.split("\t") for line in lines[1:] if line]


def _column_picker(header: list[str], mapping: Mapping[str, str], path: Path):
    idx = {}
    for logical, actual in mapping.items():
        if actual not in header:
            raise BundleFormatError(
                f"{path}: column {actual!r} (for field {logical!r}) not in header {header}"
            )
        idx[logical] = header.index(actual)
    return lambda row, logical: row[idx[logical]]


def _events_rows(log: InteractionLog) -> list[list]:
    return [
        [ev.user, ev.day, ev.signal, ev.level, ev.entity, ev.count]
        for ev in log.canonical_events()
    ]


def save_bundle(bundle: DatasetBundle, path: str | Path) -> None:
    """Write the bundle directory; output bytes are canonical, so saving
    the same bundle twice is byte-identical."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "emb").mkdir(exist_ok=True)

    manifest = {
        "format_version": _FORMAT_VERSION,
        "kind": "coldrec-bundle",
        "counts": {
            "tracks": bundle.catalog.size,
            "warm": len(bundle.universe.warm),
            "cold": len(bundle.universe.cold),
        },
        "spaces": {s: {"dim": bundle.track_embeddings[s].dim} for s in bundle.spaces},
        "splits": {name: len(users) for name, users in sorted(bundle.splits.items())},
        "min_truth_listens": bundle.min_truth_listens,
        "files": dict(_DEFAULT_FILES),
        "columns": {k: dict(v) for k, v in _DEFAULT_COLUMNS.items()},
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    _write_tsv(
        root / "tracks.tsv",
        ["track_id", "artist_id", "album_id", "rank", "genres"],
        [
            [t, m.artist_id, m.album_id, m.rank, "|".join(m.genres) or "-"]
            for t, m in sorted(bundle.catalog.meta.items())
        ],
    )
    _write_tsv(
        root / "playlists.tsv",
        ["playlist_id", "track_ids"],
        [
            [pid, ",".join(str(t) for t in tracks)]
            for pid, tracks in sorted(bundle.catalog.playlists.items())
        ],
    )
    split_of: dict[int, str] = {}
    for name, users in sorted(bundle.splits.items()):
        for u in users:
            split_of[u] = name
    user_rows = []
    for u in sorted(bundle.universe.warm | bundle.universe.cold):
        demo = bundle.universe.demographics_of(u)
        role = "warm" if u in bundle.universe.warm else "cold"
        user_rows.append(
            [
                u,
                role,
                split_of.get(u, "-"),
                _fmt_opt(demo.country),
                _fmt_opt(demo.age),
                bundle.registration_day.get(u, 0),
            ]
        )
    _write_tsv(
        root / "users.tsv",
        ["user_id", "role", "split", "country", "age", "registration_day"],
        user_rows,
    )
    event_header = ["user_id", "day", "signal", "level", "entity_id", "count"]
    _write_tsv(root / "history.tsv", event_header, _events_rows(bundle.history))
    _write_tsv(root / "features.tsv", event_header, _events_rows(bundle.features_log))
    _write_tsv(
        root / "ground_truth.tsv",
        ["user_id", "track_ids"],
        [
            [u, ",".join(str(t) for t in sorted(ts))]
            for u, ts in sorted(bundle.ground_truth.items())
        ],
    )
    for space in bundle.spaces:
        write_embeddings(bundle.track_embeddings[space], root / "emb" / f"{space}.tracks.emb1")
        write_embeddings(bundle.user_embeddings[space], root / "emb" / f"{space}.users.emb1")


def _load_events(path: Path, columns: Mapping[str, str]) -> InteractionLog:
    header, rows = _read_tsv(path)
    pick = _column_picker(header, columns, path)
    events = []
    for row in rows:
        events.append(
            Event(
                user=int(pick(row, "user_id")),
                day=int(pick(row, "day")),
                signal=pick(row, "signal"),
                level=pick(row, "level"),
                entity=int(pick(row, "entity_id")),
                count=int(pick(row, "count")),
            )
        )
    return InteractionLog(events)


def load_bundle(path: str | Path) -> DatasetBundle:
    """Load and fully validate a bundle directory.

    The manifest's ``files`` and ``columns`` sections adapt external
    layouts (alternative file names / column names) onto the internal
    schema."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise BundleFormatError(f"missing bundle manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("kind") != "coldrec-bundle":
        raise BundleFormatError(f"{manifest_path}: not a bundle manifest")
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise BundleFormatError(
            f"{manifest_path}: unsupported format version {manifest.get('format_version')}"
        )
    files = {**_DEFAULT_FILES, **manifest.get("files", {})}
    columns = {
        key: {**_DEFAULT_COLUMNS[key], **manifest.get("columns", {}).get(key, {})}
        for key in _DEFAULT_COLUMNS
    }

    tracks_path = root / files["tracks"]
    header, rows = _read_tsv(tracks_path)
    pick = _column_picker(header, columns["tracks"], tracks_path)
    meta = {}
    for row in rows:
        genres = pick(row, "genres")
        meta[int(pick(row, "track_id"))] = TrackMeta(
            artist_id=int(pick(row, "artist_id")),
            album_id=int(pick(row, "album_id")),
            rank=int(pick(row, "rank")),
            genres=tuple(genres.split("|")) if genres != "-" else (),
        )
    playlists = {}
    playlists_path = root / files["playlists"]
    if playlists_path.exists():
        _, prows = _read_tsv(playlists_path)
        for row in prows:
            playlists[int(row[0])] = tuple(
                int(t) for t in row[1].split(",") if t
            )
    catalog = Catalog(meta, playlists)

    users_path = root / files["users"]
    header, rows = _read_tsv(users_path)
    pick = _column_picker(header, columns["users"], users_path)
    warm, cold = set(), set()
    demographics = {}
    registration_day = {}
    splits: dict[str, set[int]] = {}
    for row in rows:
        uid = int(pick(row, "user_id"))
        role = pick(row, "role")
        if role == "warm":
            warm.add(uid)
        elif role == "cold":
            cold.add(uid)
        else:
            raise BundleFormatError(f"{users_path}: unknown role {role!r} for user {uid}")
        age = _parse_opt(pick(row, "age"))
        demographics[uid] = Demographics(
            country=_parse_opt(pick(row, "country")),
            age=None if age is None else int(age),
        )
        registration_day[uid] = int(pick(row, "registration_day"))
        split = _parse_opt(pick(row, "split"))
        if split is not None:
            splits.setdefault(split, set()).add(uid)
    universe = UserUniverse(warm, cold, demographics)

    history = _load_events(root / files["history"], columns["events"])
    features_log = _load_events(root / files["features"], columns["events"])

    truth_path = root / files["ground_truth"]
    _, rows = _read_tsv(truth_path)
    ground_truth = {
        int(row[0]): frozenset(int(t) for t in row[1].split(",") if t) for row in rows
    }

    track_embeddings, user_embeddings = {}, {}
    for space in sorted(manifest.get("spaces", {})):
        t_rel = files.get(f"emb:{space}:tracks", f"emb/{space}.tracks.emb1")
        u_rel = files.get(f"emb:{space}:users", f"emb/{space}.users.emb1")
        for rel in (t_rel, u_rel):
            if not (root / rel).exists():
                raise BundleFormatError(f"missing embedding file: {root / rel}")
        track_embeddings[space] = read_embeddings(root / t_rel)
        user_embeddings[space] = read_embeddings(root / u_rel)
        declared = manifest["spaces"][space].get("dim")
        if declared is not None and declared != track_embeddings[space].dim:
            raise BundleFormatError(
                f"space {space!r}: manifest dim {declared} != file dim "
                f"{track_embeddings[space].dim}"
            )

    bundle = DatasetBundle(
        catalog=catalog,
        universe=universe,
        registration_day=registration_day,
        history=history,
        features_log=features_log,
        splits={name: frozenset(users) for name, users in splits.items()},
        ground_truth=ground_truth,
        track_embeddings=track_embeddings,
        user_embeddings=user_embeddings,
        min_truth_listens=manifest.get("min_truth_listens", 50),
    )
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

TRACK_BASE = 1_000_000
ARTIST_BASE = 2_000_000
ALBUM_BASE = 3_000_000
PLAYLIST_BASE = 4_000_000

_COUNTRIES = ("FR", "BR", "DE", "US", "GB", "MX", "JP", "SE")

_TRACKS_PER_ALBUM = 4
_TRACKS_PER_ARTIST = 8

# (signal, level, probability) for non-onboarding registration-day draws
_EVENT_MIX = (
    ("stream", "track", 0.65),
    ("skip", "track", 0.12),
    ("favorite", "track", 0.06),
    ("favorite", "artist", 0.04),
    ("favorite", "album", 0.03),
    ("search", "track", 0.04),
    ("search", "artist", 0.03),
    ("search", "album", 0.01),
    ("search", "playlist", 0.01),
    ("ban", "track", 0.01),
)


@dataclass(frozen=True)
class SyntheticConfig:
    n_genres: int = 10
    n_warm: int = 5000
    n_cold: int = 1000
    n_tracks: int = 2000
    dim: int = 32
    mixture_alpha: float = 0.15  # Dirichlet concentration; lower = purer taste
    noise: float = 0.2  # track embedding spread around the genre anchor
    zipf_s: float = 1.0  # within-genre popularity skew
    history_mean: float = 80.0
    reg_events_mean: float = 4.0
    p_zero_reg: float = 0.12
    onboarding_prob: float = 0.6
    onboarding_max: int = 5
    truth_listens_min: int = 50
    truth_extra_mean: float = 15.0
    validation_fraction: float = 2.0 / 3.0
    playlists_per_genre: int = 6
    playlist_size: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("n_genres", "n_warm", "n_cold", "n_tracks", "dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not 0.0 <= self.p_zero_reg <= 1.0:
            raise ValidationError("p_zero_reg must be a probability")
        if not 0.0 <= self.validation_fraction <= 1.0:
            raise ValidationError("validation_fraction must be in [0, 1]")
        if self.n_tracks < self.n_genres:
            raise ValidationError("need at least one track per genre")


@dataclass(frozen=True)
class SyntheticTruth:
    """Planted quantities, for oracle experiments only (never serialized)."""

    mixtures: dict[int, np.ndarray]  # user -> genre mixture
    track_genre: dict[int, int]
    genre_tracks: dict[int, list[int]]
    track_weight: dict[int, float]  # within-genre popularity weight


def _f32(a: np.ndarray) -> np.ndarray:
    # embeddings are stored as float32; snap now so save/load is lossless
    return a.astype(np.float32).astype(np.float64)


class _Planted:
    """Shared sampling helpers over the planted genre structure."""

    def __init__(self, cfg: SyntheticConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        g = cfg.n_genres
        bounds = np.linspace(0, cfg.n_tracks, g + 1).astype(int)
        self.genre_tracks = {
            gi: [TRACK_BASE + t for t in range(bounds[gi], bounds[gi + 1])]
            for gi in range(g)
        }
        self.track_genre = {
            t: gi for gi, ts in self.genre_tracks.items() for t in ts
        }
        self.weights = {}
        for gi, ts in self.genre_tracks.items():
            w = 1.0 / np.arange(1, len(ts) + 1) ** cfg.zipf_s
            self.weights[gi] = w / w.sum()
        self.anchors = rng.standard_normal((g, cfg.dim))
        self.anchors /= np.linalg.norm(self.anchors, axis=1, keepdims=True)

    def sample_tracks(self, theta: np.ndarray, n: int) -> list[int]:
        """n track draws (with replacement): genre ~ theta, track ~ zipf."""
        genre_draws = self.rng.choice(self.cfg.n_genres, size=n, p=theta)
        counts = np.bincount(genre_draws, minlength=self.cfg.n_genres)
        out: list[int] = []
        for gi in range(self.cfg.n_genres):
            if counts[gi]:
                ts = self.genre_tracks[gi]
                idx = self.rng.choice(len(ts), size=int(counts[gi]), p=self.weights[gi])
                out.extend(ts[int(i)] for i in idx)
        return out

    def sample_distinct(self, theta: np.ndarray, n: int) -> set[int]:
        """About n distinct tracks allocated across genres by theta."""
        per_genre = self.rng.multinomial(n, theta)
        out: set[int] = set()
        for gi, cnt in enumerate(per_genre):
            if cnt == 0:
                continue
            ts = self.genre_tracks[gi]
            take = min(int(cnt), len(ts))
            idx = self.rng.choice(len(ts), size=take, replace=False, p=self.weights[gi])
            out.update(ts[i] for i in idx)
        return out


def generate_synthetic(
    cfg: SyntheticConfig, return_truth: bool = False
) -> DatasetBundle | tuple[DatasetBundle, SyntheticTruth]:
    """Planted-preference bundle: same-genre tracks cluster in embedding
    space, and each user's registration-day events and 30-day ground truth
    are drawn from one genre mixture, so informative features imply
    predictable truth. Deterministic given the seed."""
    rng = np.random.default_rng(cfg.seed)
    planted = _Planted(cfg, rng)

    # track metadata: genre-pure albums and artists over contiguous blocks
    meta = {}
    for gi in sorted(planted.genre_tracks):
        for j, tid in enumerate(planted.genre_tracks[gi]):
            base = planted.genre_tracks[gi][0] - TRACK_BASE
            meta[tid] = TrackMeta(
                artist_id=ARTIST_BASE + (base + j) // _TRACKS_PER_ARTIST,
                album_id=ALBUM_BASE + (base + j) // _TRACKS_PER_ALBUM,
                rank=0,  # filled after histories exist
                genres=(f"genre_{gi:02d}",),
            )

    # playlists: genre-pure, popularity-weighted samples
    playlists = {}
    pid = PLAYLIST_BASE
    for gi in sorted(planted.genre_tracks):
        ts = planted.genre_tracks[gi]
        size = min(cfg.playlist_size, len(ts))
        for _ in range(cfg.playlists_per_genre):
            idx = rng.choice(len(ts), size=size, replace=False, p=planted.weights[gi])
            playlists[pid] = tuple(sorted(ts[i] for i in idx))
            pid += 1

    # per-genre country preference: one favored country, rest uniform
    def sample_country(gi: int) -> str | None:
        if rng.random() < 0.05:
            return None
        if rng.random() < 0.5:
            return _COUNTRIES[gi % len(_COUNTRIES)]
        return _COUNTRIES[int(rng.integers(len(_COUNTRIES)))]

    def sample_age() -> int | None:
        if rng.random() < 0.05:
            return None
        return int(rng.integers(14, 71))

    warm_ids = list(range(1, cfg.n_warm + 1))
    cold_ids = list(range(cfg.n_warm + 1, cfg.n_warm + cfg.n_cold + 1))

    mixtures: dict[int, np.ndarray] = {}
    demographics: dict[int, Demographics] = {}
    registration_day: dict[int, int] = {}

    def registration_slice(user: int, theta: np.ndarray, day: int) -> list[Event]:
        events: list[Event] = []
        if rng.random() >= cfg.p_zero_reg:
            n_ev = 1 + int(rng.poisson(max(cfg.reg_events_mean - 1.0, 0.0)))
            kinds = rng.choice(
                len(_EVENT_MIX), size=n_ev, p=[p for _, _, p in _EVENT_MIX]
            )
            counts: dict[tuple[str, str, int], int] = {}
            for kind in kinds:
                signal, level, _ = _EVENT_MIX[int(kind)]
                track = planted.sample_tracks(theta, 1)[0]
                if level == "track":
                    entity = track
                elif level == "artist":
                    entity = meta[track].artist_id
                elif level == "album":
                    entity = meta[track].album_id
                else:
                    gi = planted.track_genre[track]
                    entity = PLAYLIST_BASE + gi * cfg.playlists_per_genre + int(
                        rng.integers(cfg.playlists_per_genre)
                    )
                key = (signal, level, entity)
                counts[key] = counts.get(key, 0) + 1
            for (signal, level, entity), n in sorted(counts.items()):
                events.append(Event(user, day, signal, level, entity, n))
        if rng.random() < cfg.onboarding_prob:
            n_art = 1 + int(rng.integers(cfg.onboarding_max))
            artists = sorted(
                {meta[t].artist_id for t in planted.sample_tracks(theta, n_art)}
            )
            for a in artists:
                events.append(Event(user, day, "onboarding", "artist", a, 1))
        return events

    # warm users: histories, embeddings, registration-day feature slices
    history_events: list[Event] = []
    feature_events: list[Event] = []
    warm_vec_tt: dict[int, np.ndarray] = {}
    warm_vec_als: dict[int, np.ndarray] = {}
    track_vec_tt = {}
    track_vec_als = {}
    for gi in sorted(planted.genre_tracks):
        for tid in planted.genre_tracks[gi]:
            track_vec_tt[tid] = planted.anchors[gi] + cfg.noise * rng.standard_normal(cfg.dim)
            track_vec_als[tid] = planted.anchors[gi] + cfg.noise * rng.standard_normal(cfg.dim)

    listeners: dict[int, set[int]] = {t: set() for t in meta}
    for u in warm_ids:
        theta = rng.dirichlet(np.full(cfg.n_genres, cfg.mixture_alpha))
        mixtures[u] = theta
        demographics[u] = Demographics(
            country=sample_country(int(np.argmax(theta))), age=sample_age()
        )
        registration_day[u] = 0
        n_h = 30 + int(rng.poisson(max(cfg.history_mean - 30.0, 0.0)))
        stream_counts: dict[int, int] = {}
        for t in planted.sample_tracks(theta, n_h):
            stream_counts[t] = stream_counts.get(t, 0) + 1
        acc = np.zeros(cfg.dim)
        for t in sorted(stream_counts):
            n = stream_counts[t]
            history_events.append(Event(u, 0, "stream", "track", t, n))
            listeners[t].add(u)
            acc += n * track_vec_tt[t]
        warm_vec_tt[u] = acc / n_h
        warm_vec_als[u] = theta @ planted.anchors + 0.1 * rng.standard_normal(cfg.dim)
        if rng.random() < 0.5:
            arts = sorted(
                {meta[t].artist_id for t in planted.sample_tracks(theta, 2)}
            )
            for a in arts:
                history_events.append(Event(u, 0, "favorite", "artist", a, 1))
        feature_events.extend(registration_slice(u, theta, day=0))

    # popularity ranks from warm distinct listeners
    by_pop = sorted(meta, key=lambda t: (-len(listeners[t]), t))
    for rank, tid in enumerate(by_pop, start=1):
        meta[tid] = TrackMeta(
            artist_id=meta[tid].artist_id,
            album_id=meta[tid].album_id,
            rank=rank,
            genres=meta[tid].genres,
        )

    # cold users: registration-day slices plus 30-day ground truth
    ground_truth: dict[int, frozenset[int]] = {}
    for u in cold_ids:
        theta = rng.dirichlet(np.full(cfg.n_genres, cfg.mixture_alpha))
        mixtures[u] = theta
        demographics[u] = Demographics(
            country=sample_country(int(np.argmax(theta))), age=sample_age()
        )
        registration_day[u] = 30
        feature_events.extend(registration_slice(u, theta, day=30))
        target = cfg.truth_listens_min + int(rng.poisson(cfg.truth_extra_mean))
        target = min(target, cfg.n_tracks)
        truth = planted.sample_distinct(theta, target)
        while len(truth) < min(cfg.truth_listens_min, cfg.n_tracks):
            truth |= planted.sample_distinct(theta, target - len(truth))
        ground_truth[u] = frozenset(truth)

    n_val = int(round(cfg.n_cold * cfg.validation_fraction))
    shuffled = list(cold_ids)
    rng.shuffle(shuffled)
    splits = {
        "validation": frozenset(shuffled[:n_val]),
        "test": frozenset(shuffled[n_val:]),
    }

    track_ids = sorted(meta)
    bundle = DatasetBundle(
        catalog=Catalog(meta, playlists),
        universe=UserUniverse(warm_ids, cold_ids, demographics),
        registration_day=registration_day,
        history=InteractionLog(history_events),
        features_log=InteractionLog(feature_events),
        splits=splits,
        ground_truth=ground_truth,
        track_embeddings={
            "tt-svd": EmbeddingTable(track_ids, _f32(np.array([track_vec_tt[t] for t in track_ids]))),
            "ut-als": EmbeddingTable(track_ids, _f32(np.array([track_vec_als[t] for t in track_ids]))),
        },
        user_embeddings={
            "tt-svd": EmbeddingTable(warm_ids, _f32(np.array([warm_vec_tt[u] for u in warm_ids]))),
            "ut-als": EmbeddingTable(warm_ids, _f32(np.array([warm_vec_als[u] for u in warm_ids]))),
        },
        min_truth_listens=min(cfg.truth_listens_min, cfg.n_tracks),
    )
    bundle.validate()
    if return_truth:
        truth_obj = SyntheticTruth(
            mixtures=mixtures,
            track_genre=dict(planted.track_genre),
            genre_tracks={g: list(ts) for g, ts in planted.genre_tracks.items()},
            track_weight={
                t: float(planted.weights[planted.track_genre[t]][i])
                for g, ts in planted.genre_tracks.items()
                for i, t in enumerate(ts)
            },
        )
        return bundle, truth_obj
    return bundle
