"""Offline evaluation: top-K metrics, multi-seed experiments with
retrained seed-dependent stages, per-interaction-count breakdowns and
popularity-rank histograms.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Catalog, EmbeddingTable, ValidationError
from .dataset import DatasetBundle
from .events import InteractionLog
from .features import ChannelSpec, GroupEmbeddings, assemble_features, fit_group_embeddings
from .recommend import (
    Recommendation,
    baseline_input_feature_clustering,
    baseline_popularity,
    baseline_registration_streams,
    recommend_full_personalized,
    recommend_semi_personalized,
)
from .regressor import RegressorSpec, TrainConfig, init_model, predict_cold_embeddings, train
from .segmentation import Segmentation, build_segmentation, full_popularity_ranking
from .trainers import build_entity_tables

# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def precision_at_k(rec: Sequence[int], truth: Iterable[int], k: int) -> float:
    """|top-k hits| / k."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    truth = set(truth)
    hits = sum(1 for t in rec[:k] if t in truth)
    return hits / k


def recall_at_k(rec: Sequence[int], truth: Iterable[int], k: int) -> float:
    """|top-k hits| / |truth|; truth must be nonempty."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    truth = set(truth)
    if not truth:
        raise ValidationError("recall is undefined for empty ground truth")
    hits = sum(1 for t in rec[:k] if t in truth)
    return hits / len(truth)


def ndcg_at_k(rec: Sequence[int], truth: Iterable[int], k: int) -> float:
    """Binary-relevance NDCG with log2 discount.

    DCG = sum_{i=1..k} rel_i / log2(i+1); the ideal DCG places
    min(k, |truth|) hits first."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    truth = set(truth)
    if not truth:
        raise ValidationError("NDCG is undefined for empty ground truth")
    dcg = 0.0
    for i, t in enumerate(rec[:k], start=1):
        if t in truth:
            dcg += 1.0 / np.log2(i + 1)
    ideal = sum(1.0 / np.log2(i + 1) for i in range(1, min(k, len(truth)) + 1))
    return dcg / ideal


# ---------------------------------------------------------------------------
# experiment harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    space: str
    strategy: str  # one of recommend.STRATEGIES
    k_rec: int = 50
    n_clusters: int = 20
    seeds: tuple[int, ...] = tuple(range(10))
    split: str = "test"
    epochs: int | None = None  # None: 130 for ut-als, 100 otherwise
    lr: float = 1e-4
    batch_size: int = 512
    hidden: tuple[int, ...] = (400, 300, 200)
    min_group_size: int = 10
    segment_metric: str = "euclidean"

    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 130 if self.space == "ut-als" else 100

    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "space": self.space,
                "strategy": self.strategy,
                "k_rec": self.k_rec,
                "n_clusters": self.n_clusters,
                "seeds": list(self.seeds),
                "split": self.split,
                "epochs": self.resolved_epochs(),
                "lr": self.lr,
                "batch_size": self.batch_size,
                "hidden": list(self.hidden),
                "min_group_size": self.min_group_size,
                "segment_metric": self.segment_metric,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class EvalReport:
    config: ExperimentConfig
    fingerprint: str
    metrics: dict[str, tuple[float, float]]  # name -> (mean, std over seeds)
    per_seed: dict[str, list[float]]
    per_user: dict[int, dict[str, float]]  # seed-averaged raw scores
    excluded_users: tuple[int, ...] = ()  # empty ground truth, flagged out

    def mean(self, metric: str) -> float:
        return self.metrics[metric][0]

    def std(self, metric: str) -> float:
        return self.metrics[metric][1]


class ExperimentContext:
    """Seed-independent stages shared across strategies and seeds:
    assembled features, group embeddings, entity tables, popularity."""

    def __init__(self, bundle: DatasetBundle, space: str, min_group_size: int = 10):
        if space not in bundle.track_embeddings:
            raise ValidationError(
                f"space {space!r} not in bundle (have {bundle.spaces})"
            )
        bundle.validate()  # loud leakage guard before any feature is consumed
        self.bundle = bundle
        self.space = space
        self.tracks = bundle.track_embeddings[space]
        self.warm_emb = bundle.user_embeddings[space]
        self.channel_spec = ChannelSpec(dim=self.tracks.dim)
        self.entity_tables = build_entity_tables(bundle.catalog, self.tracks)
        self.groups = fit_group_embeddings(
            bundle.universe, self.warm_emb, min_group_size=min_group_size
        )
        self.popularity = full_popularity_ranking(
            sorted(bundle.universe.warm), bundle.history, bundle.catalog
        )
        self.warm_ids = sorted(
            u for u in bundle.universe.warm if u in self.warm_emb
        )
        self.warm_features = self._assemble(self.warm_ids)
        self.warm_targets = np.array([self.warm_emb.get(u) for u in self.warm_ids])
        self._cold_features: dict[str, EmbeddingTable] = {}
        self._pred_cache: dict[tuple, EmbeddingTable] = {}
        self._seg_cache: dict[tuple, Segmentation] = {}

    def _assemble(self, users: Sequence[int]) -> EmbeddingTable:
        vecs = []
        for u in users:
            fv = assemble_features(
                u,
                self.bundle.feature_events(u),
                self.bundle.registration_day[u],
                self.entity_tables,
                self.groups,
                self.channel_spec,
                self.bundle.universe.demographics_of(u),
            )
            vecs.append(fv.values)
        return EmbeddingTable(users, np.array(vecs).reshape(len(users), self.channel_spec.total_dim))

    def cold_features(self, split: str) -> EmbeddingTable:
        if split not in self._cold_features:
            users = sorted(self.bundle.cold_split(split))
            self._cold_features[split] = self._assemble(users)
        return self._cold_features[split]

    def predicted_cold(self, cfg: ExperimentConfig, seed: int) -> EmbeddingTable:
        """Train the regressor for one seed and predict the split's users."""
        key = (cfg.split, seed, cfg.resolved_epochs(), cfg.lr, cfg.batch_size, cfg.hidden)
        if key not in self._pred_cache:
            spec = RegressorSpec(
                input_dim=self.channel_spec.total_dim,
                output_dim=self.tracks.dim,
                hidden=cfg.hidden,
            )
            model = init_model(spec, seed=seed)
            model.channel_spec_version = self.channel_spec.version
            tcfg = TrainConfig(
                lr=cfg.lr,
                batch_size=cfg.batch_size,
                epochs=cfg.resolved_epochs(),
                seed=seed,
            )
            model, _ = train(model, self.warm_features.vectors, self.warm_targets, tcfg)
            self._pred_cache[key] = predict_cold_embeddings(model, self.cold_features(cfg.split))
        return self._pred_cache[key]

    def segmentation(self, cfg: ExperimentConfig, seed: int) -> Segmentation:
        key = (cfg.n_clusters, seed, cfg.k_rec, cfg.segment_metric)
        if key not in self._seg_cache:
            self._seg_cache[key] = build_segmentation(
                self.warm_emb,
                cfg.n_clusters,
                self.bundle.history,
                self.bundle.catalog,
                k_items=cfg.k_rec,
                seed=seed,
                metric=cfg.segment_metric,
            )
        return self._seg_cache[key]


def recommend_for_users(
    ctx: ExperimentContext, cfg: ExperimentConfig, seed: int
) -> dict[int, Recommendation]:
    """Produce one recommendation per user of the configured split."""
    bundle = ctx.bundle
    users = sorted(bundle.cold_split(cfg.split))
    k = cfg.k_rec
    if cfg.strategy == "popularity":
        base = baseline_popularity(bundle.catalog, bundle.history, k)
        return {
            u: Recommendation(user=u, items=base.items, strategy="popularity")
            for u in users
        }
    if cfg.strategy == "reg-streams":
        return {
            u: baseline_registration_streams(
                u,
                InteractionLog(bundle.feature_events(u)),
                ctx.tracks,
                k,
                popularity=ctx.popularity,
            )
            for u in users
        }
    if cfg.strategy == "feat-cluster":
        return baseline_input_feature_clustering(
            ctx.warm_features,
            ctx.cold_features(cfg.split),
            cfg.n_clusters,
            bundle.history,
            bundle.catalog,
            k,
            seed=seed,
        )
    predicted = ctx.predicted_cold(cfg, seed)
    if cfg.strategy == "semi":
        seg = ctx.segmentation(cfg, seed)
        return {
            u: recommend_semi_personalized(u, predicted.get(u), seg, k) for u in users
        }
    if cfg.strategy == "full":
        return {
            u: recommend_full_personalized(
                u, predicted.get(u), ctx.tracks, k, popularity=ctx.popularity
            )
            for u in users
        }
    raise ValidationError(f"unknown strategy {cfg.strategy!r}")


def run_experiment(
    bundle: DatasetBundle,
    cfg: ExperimentConfig,
    context: ExperimentContext | None = None,
) -> EvalReport:
    """Retrain seed-dependent stages per seed, recommend for the evaluation
    split from registration-day features only, score against the 30-day
    ground truth, and aggregate mean and std across seeds."""
    ctx = context or ExperimentContext(bundle, cfg.space, cfg.min_group_size)
    users = sorted(bundle.cold_split(cfg.split))
    excluded = tuple(u for u in users if not bundle.ground_truth.get(u))
    scored_users = [u for u in users if u not in set(excluded)]
    per_seed: dict[str, list[float]] = {"precision": [], "recall": [], "ndcg": []}
    user_sums: dict[int, dict[str, float]] = {
        u: {"precision": 0.0, "recall": 0.0, "ndcg": 0.0} for u in scored_users
    }
    for seed in cfg.seeds:
        recs = recommend_for_users(ctx, cfg, seed)
        seed_scores = {"precision": [], "recall": [], "ndcg": []}
        for u in scored_users:
            truth = bundle.ground_truth[u]
            tracks = recs[u].tracks
            p = precision_at_k(tracks, truth, cfg.k_rec)
            r = recall_at_k(tracks, truth, cfg.k_rec)
            n = ndcg_at_k(tracks, truth, cfg.k_rec)
            seed_scores["precision"].append(p)
            seed_scores["recall"].append(r)
            seed_scores["ndcg"].append(n)
            user_sums[u]["precision"] += p
            user_sums[u]["recall"] += r
            user_sums[u]["ndcg"] += n
        for m, vals in seed_scores.items():
            per_seed[m].append(float(np.mean(vals)) if vals else float("nan"))
    n_seeds = len(cfg.seeds)
    metrics = {
        m: (float(np.mean(vals)), float(np.std(vals))) for m, vals in per_seed.items()
    }
    per_user = {
        u: {m: s / n_seeds for m, s in sums.items()} for u, sums in user_sums.items()
    }
    return EvalReport(
        config=cfg,
        fingerprint=cfg.fingerprint(),
        metrics=metrics,
        per_seed=per_seed,
        per_user=per_user,
        excluded_users=excluded,
    )


# ---------------------------------------------------------------------------
# breakdowns and histograms
# ---------------------------------------------------------------------------

DEFAULT_BINS = ((0, 0), (1, 2), (3, 5), (6, None))


def breakdown_by_interaction(
    report: EvalReport,
    features_log: InteractionLog,
    signal: str,
    bins: Sequence[tuple[int, int | None]] = DEFAULT_BINS,
    metric: str = "precision",
) -> list[dict]:
    """Mean per-user metric bucketed by registration-day activity counts.

    Returns one row per nonempty bin: {label, lo, hi, n_users, mean}.
    Empty bins are absent rather than reported as zero."""
    level = "artist" if signal == "onboarding" else "track"
    rows = []
    for lo, hi in bins:
        members = []
        for u, scores in sorted(report.per_user.items()):
            n = sum(features_log.counts(u, signal=signal, level=level).values())
            if n >= lo and (hi is None or n <= hi):
                members.append(scores[metric])
        if not members:
            continue
        label = f"{lo}+" if hi is None else (f"{lo}" if lo == hi else f"{lo}-{hi}")
        rows.append(
            {
                "label": label,
                "lo": lo,
                "hi": hi,
                "n_users": len(members),
                "mean": float(np.mean(members)),
            }
        )
    return rows


def popularity_distribution(
    recs: Iterable[Recommendation], catalog: Catalog, bucket_size: int = 1000
) -> list[dict]:
    """Histogram of recommended slots by global popularity rank.

    Buckets cover ranks [start, start+bucket_size); frequencies sum to 1."""
    if bucket_size < 1:
        raise ValidationError(f"bucket_size must be >= 1, got {bucket_size}")
    counts: dict[int, int] = {}
    total = 0
    for rec in recs:
        for t in rec.tracks:
            b = (catalog.rank_of(t) - 1) // bucket_size
            counts[b] = counts.get(b, 0) + 1
            total += 1
    rows = []
    for b in sorted(counts):
        rows.append(
            {
                "rank_lo": b * bucket_size + 1,
                "rank_hi": (b + 1) * bucket_size,
                "count": counts[b],
                "frequency": counts[b] / total if total else 0.0,
            }
        )
    return rows
