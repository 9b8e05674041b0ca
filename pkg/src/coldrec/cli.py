"""Pipeline entry point: one subcommand per stage, file handoffs between
stages, and a manifest per artifact fingerprinting its inputs, config and
seed so downstream stages can refuse mismatched lineages.

Exit codes: 0 success, 1 usage error, 2 data validation error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .core import EmbeddingTable, ValidationError
from .dataset import BundleFormatError, DatasetBundle, SyntheticConfig, generate_synthetic, load_bundle, save_bundle
from .embio import EmbeddingFormatError, read_embeddings, write_embeddings
from .evaluation import (
    DEFAULT_BINS,
    EvalReport,
    ExperimentConfig,
    ExperimentContext,
    breakdown_by_interaction,
    popularity_distribution,
    recommend_for_users,
    run_experiment,
)
from .features import ChannelSpec, fit_group_embeddings
from .recommend import STRATEGIES, Recommendation
from .regressor import (
    RegressorSpec,
    TrainConfig,
    TrainingDivergedError,
    init_model,
    load_model,
    predict_cold_embeddings,
    save_model,
    train,
    write_loss_curve,
)
from .segmentation import build_segmentation, export_segmentation_text, load_segmentation, save_segmentation
from .service import ServingSnapshot, write_snapshot, serve as run_service
from .trainers import (
    AlsConfig,
    build_affinity_matrix,
    build_entity_tables,
    build_sppmi,
    count_cooccurrences,
    train_als,
    train_svd_embeddings,
    warm_user_embedding_from_history,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems must exit 1, not argparse's 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): _sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def _manifest_path(out: Path, stage_key: str) -> Path:
    return out / "manifests" / f"{stage_key}.json"


def _fingerprint(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


def write_stage_manifest(
    out: Path, stage_key: str, config: dict, inputs: dict[str, str], outputs: dict[str, str]
) -> str:
    payload = {
        "stage": stage_key,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
    }
    fp = _fingerprint(payload)
    payload["fingerprint"] = fp
    path = _manifest_path(out, stage_key)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return fp


def read_stage_manifest(out: Path, stage_key: str, producer: str) -> dict:
    path = _manifest_path(out, stage_key)
    if not path.exists():
        raise DataError(
            f"missing artifact manifest {path}; run `coldrec {producer}` first"
        )
    payload = json.loads(path.read_text(encoding="utf-8"))
    recorded = payload.pop("fingerprint", None)
    if recorded != _fingerprint(payload):
        raise DataError(f"{path}: manifest fingerprint mismatch (file was edited?)")
    payload["fingerprint"] = recorded
    return payload


def _require_lineage(manifest: dict, key: str, expected: str, stage: str) -> None:
    actual = manifest["inputs"].get(key)
    if actual != expected:
        raise DataError(
            f"lineage mismatch: {manifest['stage']} was built from {key}="
            f"{actual}, but {stage} is running against {key}={expected}"
        )


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------


def _out_dir(args) -> Path:
    return Path(args.out)


def _load_run_bundle(args) -> tuple[DatasetBundle, str]:
    out = _out_dir(args)
    bundle_dir = Path(args.bundle) if args.bundle else out / "bundle"
    if not (bundle_dir / "manifest.json").exists():
        raise DataError(
            f"no bundle at {bundle_dir}; run `coldrec gen-data` or pass --bundle"
        )
    bundle = load_bundle(bundle_dir)
    gen_manifest = _manifest_path(out, "gen-data")
    if gen_manifest.exists():
        fp = read_stage_manifest(out, "gen-data", "gen-data")["fingerprint"]
    else:
        fp = _fingerprint({"bundle_files": _hash_tree(bundle_dir)})
    return bundle, fp


def _space_key(stage: str, space: str) -> str:
    return f"{stage}-{space}"


def _apply_trained_embeddings(bundle: DatasetBundle, out: Path, space: str, stage: str) -> str:
    """Swap the bundle's embeddings for the train-embeddings stage output."""
    emb_dir = out / "embeddings" / space
    tracks = emb_dir / "tracks.emb1"
    users = emb_dir / "users.emb1"
    if not tracks.exists() or not users.exists():
        raise DataError(
            f"no trained embeddings under {emb_dir}; run `coldrec train-embeddings "
            f"--space {space}` first"
        )
    manifest = read_stage_manifest(out, _space_key("train-embeddings", space), "train-embeddings")
    bundle.track_embeddings[space] = read_embeddings(tracks)
    bundle.user_embeddings[space] = read_embeddings(users)
    return manifest["fingerprint"]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    cfg = SyntheticConfig(
        n_genres=args.genres,
        n_warm=args.warm,
        n_cold=args.cold,
        n_tracks=args.tracks,
        dim=args.dim,
        seed=args.seed,
        **(args.config.get("synthetic", {}) if args.config else {}),
    )
    bundle = generate_synthetic(cfg)
    bundle_dir = out / "bundle"
    save_bundle(bundle, bundle_dir)
    write_stage_manifest(
        out,
        "gen-data",
        config={
            "n_genres": cfg.n_genres,
            "n_warm": cfg.n_warm,
            "n_cold": cfg.n_cold,
            "n_tracks": cfg.n_tracks,
            "dim": cfg.dim,
            "seed": cfg.seed,
        },
        inputs={},
        outputs=_hash_tree(bundle_dir),
    )
    print(f"wrote bundle: {bundle_dir} ({cfg.n_warm} warm, {cfg.n_cold} cold)")
    return EXIT_OK


def cmd_train_embeddings(args) -> int:
    out = _out_dir(args)
    bundle, bundle_fp = _load_run_bundle(args)
    space = args.space
    dim = args.dim or bundle.track_embeddings.get(space, next(iter(bundle.track_embeddings.values()))).dim
    emb_dir = out / "embeddings" / space
    emb_dir.mkdir(parents=True, exist_ok=True)
    if space == "ut-als":
        affinity = build_affinity_matrix(bundle.history, bundle.catalog)
        als_cfg = AlsConfig(dim=dim, iterations=args.iterations, seed=args.seed)
        users, tracks, history = train_als(affinity, als_cfg)
        print(f"ALS objective: {history[0]:.6g} -> {history[-1]:.6g}")
    elif space == "tt-svd":
        counts = count_cooccurrences(bundle.catalog.playlists.values())
        sppmi = build_sppmi(counts, shift_k=args.shift_k)
        tracks = train_svd_embeddings(sppmi, dim, seed=args.seed)
        rows = {}
        for u in sorted(bundle.universe.warm):
            rows[u] = warm_user_embedding_from_history(u, bundle.history, tracks).vector
        users = EmbeddingTable.from_dict(rows, dim=dim)
        print(f"SPPMI nnz: {sppmi.matrix.nnz}, order {sppmi.order}")
    else:
        raise UsageError(f"--space must be ut-als or tt-svd, got {space!r}")
    write_embeddings(tracks, emb_dir / "tracks.emb1")
    write_embeddings(users, emb_dir / "users.emb1")
    write_stage_manifest(
        out,
        _space_key("train-embeddings", space),
        config={"space": space, "dim": dim, "seed": args.seed},
        inputs={"bundle": bundle_fp},
        outputs=_hash_tree(emb_dir),
    )
    print(f"wrote embeddings: {emb_dir}")
    return EXIT_OK


def _resolve_embeddings(args, bundle, out, stage) -> tuple[dict[str, str], str]:
    """Returns (extra lineage inputs, embeddings source tag)."""
    if args.embeddings == "trained":
        fp = _apply_trained_embeddings(bundle, out, args.space, stage)
        return {"embeddings": fp}, "trained"
    return {}, "bundle"


def cmd_segment(args) -> int:
    out = _out_dir(args)
    bundle, bundle_fp = _load_run_bundle(args)
    extra, source = _resolve_embeddings(args, bundle, out, "segment")
    seg = build_segmentation(
        bundle.user_embeddings[args.space],
        args.clusters,
        bundle.history,
        bundle.catalog,
        k_items=args.top_k,
        seed=args.seed,
        metric=args.metric,
    )
    seg_dir = out / "segmentation"
    seg_dir.mkdir(parents=True, exist_ok=True)
    seg_path = seg_dir / f"{args.space}.seg"
    save_segmentation(seg, seg_path)
    export_segmentation_text(seg, seg_dir / f"{args.space}.txt")
    write_stage_manifest(
        out,
        _space_key("segment", args.space),
        config={
            "space": args.space,
            "clusters": args.clusters,
            "top_k": args.top_k,
            "seed": args.seed,
            "metric": args.metric,
            "embeddings": source,
        },
        inputs={"bundle": bundle_fp, **extra},
        outputs={str(seg_path.relative_to(out)): _sha256_file(seg_path)},
    )
    print(f"wrote segmentation: {seg_path} (k={seg.k})")
    return EXIT_OK


def cmd_build_features(args) -> int:
    out = _out_dir(args)
    bundle, bundle_fp = _load_run_bundle(args)
    extra, source = _resolve_embeddings(args, bundle, out, "build-features")
    ctx = ExperimentContext(bundle, args.space, min_group_size=args.min_group_size)
    feat_dir = out / "features" / args.space
    feat_dir.mkdir(parents=True, exist_ok=True)
    write_embeddings(ctx.warm_features, feat_dir / "warm.emb1")
    for split in sorted(bundle.splits):
        write_embeddings(ctx.cold_features(split), feat_dir / f"{split}.emb1")
    ctx.channel_spec.save(feat_dir / "channel_spec.json")
    ctx.groups.save(feat_dir / "groups.json")
    write_stage_manifest(
        out,
        _space_key("build-features", args.space),
        config={
            "space": args.space,
            "min_group_size": args.min_group_size,
            "channel_spec_version": ctx.channel_spec.version,
            "embeddings": source,
        },
        inputs={"bundle": bundle_fp, **extra},
        outputs=_hash_tree(feat_dir),
    )
    print(f"wrote features: {feat_dir} (D={ctx.channel_spec.total_dim})")
    return EXIT_OK


def cmd_train_regressor(args) -> int:
    out = _out_dir(args)
    bundle, bundle_fp = _load_run_bundle(args)
    extra, _ = _resolve_embeddings(args, bundle, out, "train-regressor")
    feat_dir = out / "features" / args.space
    if not (feat_dir / "warm.emb1").exists():
        raise DataError(
            f"no features under {feat_dir}; run `coldrec build-features --space "
            f"{args.space}` first"
        )
    feat_manifest = read_stage_manifest(
        out, _space_key("build-features", args.space), "build-features"
    )
    _require_lineage(feat_manifest, "bundle", bundle_fp, "train-regressor")
    warm_features = read_embeddings(feat_dir / "warm.emb1")
    spec_path = feat_dir / "channel_spec.json"
    channel_spec = ChannelSpec.load(spec_path)
    warm_emb = bundle.user_embeddings[args.space]
    ids = [int(u) for u in warm_features.ids]
    targets = np.array([warm_emb.get(u) for u in ids])
    epochs = args.epochs if args.epochs else (130 if args.space == "ut-als" else 100)
    spec = RegressorSpec(
        input_dim=warm_features.dim,
        output_dim=warm_emb.dim,
        hidden=tuple(args.hidden),
    )
    model = init_model(spec, seed=args.seed)
    model.channel_spec_version = channel_spec.version
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=epochs, seed=args.seed)
    model, history = train(model, warm_features.vectors, targets, tcfg)
    model_dir = out / "model"
    model_dir.mkdir(parents=True, exist_ok=True)
    model_path = model_dir / f"{args.space}.rgr"
    save_model(model, model_path)
    write_loss_curve(history, model_dir / f"{args.space}-loss.csv")
    write_stage_manifest(
        out,
        _space_key("train-regressor", args.space),
        config={
            "space": args.space,
            "epochs": epochs,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "hidden": list(args.hidden),
            "seed": args.seed,
        },
        inputs={"bundle": bundle_fp, "features": feat_manifest["fingerprint"], **extra},
        outputs=_hash_tree(model_dir),
    )
    print(f"wrote model: {model_path} (final train mse {history[-1][1]:.6g})")
    return EXIT_OK


def _write_recommendations(path: Path, recs: dict[int, Recommendation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\tstrategy\tsegment_id\ttrack_ids\tscores\n")
        for u in sorted(recs):
            rec = recs[u]
            seg = "-" if rec.segment is None else str(rec.segment)
            tracks = ",".join(str(t) for t in rec.tracks)
            scores = ",".join(f"{s:.8g}" for _, s in rec.items)
            fh.write(f"{u}\t{rec.strategy}\t{seg}\t{tracks}\t{scores}\n")


def cmd_recommend(args) -> int:
    out = _out_dir(args)
    bundle, bundle_fp = _load_run_bundle(args)
    extra, _ = _resolve_embeddings(args, bundle, out, "recommend")
    cfg = ExperimentConfig(
        space=args.space,
        strategy=args.strategy,
        k_rec=args.top_k,
        n_clusters=args.clusters,
        seeds=(args.seed,),
        split=args.split,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        hidden=tuple(args.hidden),
    )
    ctx = ExperimentContext(bundle, args.space, min_group_size=args.min_group_size)
    recs = recommend_for_users(ctx, cfg, args.seed)
    rec_dir = out / "recs"
    rec_dir.mkdir(parents=True, exist_ok=True)
    rec_path = rec_dir / f"{args.space}-{args.strategy}-{args.split}.tsv"
    _write_recommendations(rec_path, recs)
    write_stage_manifest(
        out,
        f"recommend-{args.space}-{args.strategy}-{args.split}",
        config={
            "space": args.space,
            "strategy": args.strategy,
            "top_k": args.top_k,
            "clusters": args.clusters,
            "split": args.split,
            "seed": args.seed,
            "epochs": cfg.resolved_epochs(),
            "lr": args.lr,
            "batch_size": args.batch_size,
        },
        inputs={"bundle": bundle_fp, **extra},
        outputs={str(rec_path.relative_to(out)): _sha256_file(rec_path)},
    )
    print(f"wrote recommendations: {rec_path} ({len(recs)} users)")
    return EXIT_OK


def _eval_csv_rows(report: EvalReport) -> list[str]:
    rows = ["metric,mean,std"]
    for metric in ("precision", "recall", "ndcg"):
        mean, std = report.metrics[metric]
        rows.append(f"{metric},{mean:.8f},{std:.8f}")
    return rows


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    bundle, bundle_fp = _load_run_bundle(args)
    extra, source = _resolve_embeddings(args, bundle, out, "evaluate")
    strategies = args.strategies.split(",") if args.strategies else list(STRATEGIES)
    for s in strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
    ctx = ExperimentContext(bundle, args.space, min_group_size=args.min_group_size)
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    seeds = tuple(range(args.seed, args.seed + args.seeds))
    for strategy in strategies:
        cfg = ExperimentConfig(
            space=args.space,
            strategy=strategy,
            k_rec=args.top_k,
            n_clusters=args.clusters,
            seeds=seeds,
            split=args.split,
            epochs=args.epochs,
            lr=args.lr,
            batch_size=args.batch_size,
            hidden=tuple(args.hidden),
        )
        report = run_experiment(bundle, cfg, context=ctx)
        base = f"{args.space}-{strategy}-{args.split}"
        (eval_dir / f"{base}-summary.csv").write_text(
            "\n".join(_eval_csv_rows(report)) + "\n", encoding="utf-8"
        )
        with open(eval_dir / f"{base}-per-seed.csv", "w", encoding="utf-8") as fh:
            fh.write("seed,precision,recall,ndcg\n")
            for i, seed in enumerate(cfg.seeds):
                fh.write(
                    f"{seed},{report.per_seed['precision'][i]:.8f},"
                    f"{report.per_seed['recall'][i]:.8f},{report.per_seed['ndcg'][i]:.8f}\n"
                )
        with open(eval_dir / f"{base}-per-user.csv", "w", encoding="utf-8") as fh:
            fh.write("user_id,precision,recall,ndcg\n")
            for u in sorted(report.per_user):
                s = report.per_user[u]
                fh.write(f"{u},{s['precision']:.8f},{s['recall']:.8f},{s['ndcg']:.8f}\n")
        write_stage_manifest(
            out,
            f"evaluate-{base}",
            config={
                "space": args.space,
                "strategy": strategy,
                "top_k": args.top_k,
                "clusters": args.clusters,
                "split": args.split,
                "seeds": list(seeds),
                "epochs": cfg.resolved_epochs(),
                "lr": args.lr,
                "batch_size": args.batch_size,
                "embeddings": source,
                "experiment_fingerprint": report.fingerprint,
            },
            inputs={"bundle": bundle_fp, **extra},
            outputs={
                str(p.relative_to(out)): _sha256_file(p)
                for p in sorted(eval_dir.glob(f"{base}-*.csv"))
            },
        )
        mean, std = report.metrics["precision"]
        print(
            f"{strategy:12s} precision@{args.top_k} {100 * mean:.2f} +- {100 * std:.2f} %"
        )
    print(f"wrote evaluation: {eval_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args)
    bundle, bundle_fp = _load_run_bundle(args)
    eval_dir = out / "eval"
    summaries = sorted(eval_dir.glob(f"{args.space}-*-{args.split}-summary.csv"))
    if not summaries:
        raise DataError(
            f"no evaluation outputs under {eval_dir}; run `coldrec evaluate` first"
        )
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for summary in summaries:
        strategy = summary.name[len(f"{args.space}-") : -len(f"-{args.split}-summary.csv")]
        manifest = read_stage_manifest(
            out, f"evaluate-{args.space}-{strategy}-{args.split}", "evaluate"
        )
        _require_lineage(manifest, "bundle", bundle_fp, "report")
        metrics = {}
        for line in summary.read_text(encoding="utf-8").splitlines()[1:]:
            name, mean, std = line.split(",")
            metrics[name] = (float(mean), float(std))
        rows.append((strategy, metrics))

    k = args.top_k
    header = f"| {'strategy':14s} | Precision@{k} (%) | Recall@{k} (%) | NDCG@{k} (%) |"
    sep = "|" + "-" * (len(header) - 2) + "|"
    lines = [header, sep]
    for strategy, metrics in rows:
        p, r, n = metrics["precision"], metrics["recall"], metrics["ndcg"]
        lines.append(
            f"| {strategy:14s} | {100 * p[0]:6.2f} +- {100 * p[1]:4.2f}   | "
            f"{100 * r[0]:6.2f} +- {100 * r[1]:4.2f} | {100 * n[0]:6.2f} +- {100 * n[1]:4.2f} |"
        )
    table = "\n".join(lines) + "\n"
    (report_dir / "table.txt").write_text(table, encoding="utf-8")
    with open(report_dir / "table.csv", "w", encoding="utf-8") as fh:
        fh.write("strategy,precision_mean,precision_std,recall_mean,recall_std,ndcg_mean,ndcg_std\n")
        for strategy, metrics in rows:
            p, r, n = metrics["precision"], metrics["recall"], metrics["ndcg"]
            fh.write(
                f"{strategy},{p[0]:.8f},{p[1]:.8f},{r[0]:.8f},{r[1]:.8f},{n[0]:.8f},{n[1]:.8f}\n"
            )
    print(table, end="")

    # per-interaction breakdown (Fig. 4 style) from per-user scores
    focus = "semi" if any(s == "semi" for s, _ in rows) else rows[0][0]
    per_user_path = eval_dir / f"{args.space}-{focus}-{args.split}-per-user.csv"
    per_user: dict[int, dict[str, float]] = {}
    for line in per_user_path.read_text(encoding="utf-8").splitlines()[1:]:
        uid, p, r, n = line.split(",")
        per_user[int(uid)] = {
            "precision": float(p), "recall": float(r), "ndcg": float(n)
        }
    pseudo = EvalReport(
        config=ExperimentConfig(space=args.space, strategy=focus),
        fingerprint="-",
        metrics={},
        per_seed={},
        per_user=per_user,
    )
    for signal in ("stream", "skip", "onboarding"):
        brows = breakdown_by_interaction(pseudo, bundle.features_log, signal, DEFAULT_BINS)
        with open(report_dir / f"breakdown_{signal}.csv", "w", encoding="utf-8") as fh:
            fh.write("bin,n_users,mean_precision\n")
            for row in brows:
                fh.write(f"{row['label']},{row['n_users']},{row['mean']:.8f}\n")

    # popularity-rank histogram (Fig. 5 style) from recommend-stage outputs
    for rec_path in sorted((out / "recs").glob(f"{args.space}-*-{args.split}.tsv")):
        strategy = rec_path.name[len(f"{args.space}-") : -len(f"-{args.split}.tsv")]
        recs = []
        for line in rec_path.read_text(encoding="utf-8").splitlines()[1:]:
            uid, strat, seg, tracks, scores = line.split("\t")
            items = tuple(
                (int(t), float(s))
                for t, s in zip(tracks.split(","), scores.split(","))
            )
            recs.append(Recommendation(user=int(uid), items=items, strategy=strat))
        hist = popularity_distribution(recs, bundle.catalog, bucket_size=args.bucket_size)
        with open(report_dir / f"popularity_{strategy}.csv", "w", encoding="utf-8") as fh:
            fh.write("rank_lo,rank_hi,count,frequency\n")
            for row in hist:
                fh.write(
                    f"{row['rank_lo']},{row['rank_hi']},{row['count']},{row['frequency']:.8f}\n"
                )
    print(f"wrote report: {report_dir}")
    return EXIT_OK


def cmd_serve(args) -> int:
    out = _out_dir(args)
    snapshot_dir = args.snapshot_dir or os.environ.get("COLDREC_SNAPSHOT")
    if snapshot_dir is None:
        # assemble a snapshot from the run directory's stage outputs
        bundle, _ = _load_run_bundle(args)
        _resolve_embeddings(args, bundle, out, "serve")
        model_path = out / "model" / f"{args.space}.rgr"
        seg_path = out / "segmentation" / f"{args.space}.seg"
        for path, producer in ((model_path, "train-regressor"), (seg_path, "segment")):
            if not path.exists():
                raise DataError(f"missing {path}; run `coldrec {producer}` first")
        model = load_model(model_path)
        seg = load_segmentation(seg_path)
        feat_dir = out / "features" / args.space
        channel_spec = ChannelSpec.load(feat_dir / "channel_spec.json")
        from .features import GroupEmbeddings

        groups = GroupEmbeddings.load(feat_dir / "groups.json")
        entity_tables = build_entity_tables(
            bundle.catalog, bundle.track_embeddings[args.space]
        )
        snapshot_dir = out / "snapshot" / args.space
        write_snapshot(snapshot_dir, model, channel_spec, groups, seg, entity_tables)
        print(f"assembled snapshot: {snapshot_dir}")
    listen = args.listen or os.environ.get("COLDREC_LISTEN", "127.0.0.1:8080")
    host, _, port = listen.rpartition(":")
    run_service(snapshot_dir, host=host or "127.0.0.1", port=int(port))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _add_common(sub, space=True):
    sub.add_argument("--out", default="runs", help="run directory for artifacts")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--config", type=str, default=None, help="JSON config overlay")
    sub.add_argument("--bundle", type=str, default=None, help="bundle directory override")
    if space:
        sub.add_argument("--space", default="tt-svd", choices=("ut-als", "tt-svd"))
        sub.add_argument(
            "--embeddings",
            default="bundle",
            choices=("bundle", "trained"),
            help="use the bundle's embeddings or the train-embeddings output",
        )


def _add_model_flags(sub):
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--lr", type=float, default=1e-4)
    sub.add_argument("--batch-size", type=int, default=512)
    sub.add_argument("--hidden", type=int, nargs="+", default=[400, 300, 200])
    sub.add_argument("--min-group-size", type=int, default=10)


def build_parser() -> _Parser:
    parser = _Parser(prog="coldrec", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic planted bundle")
    _add_common(p, space=False)
    p.add_argument("--genres", type=int, default=10)
    p.add_argument("--warm", type=int, default=5000)
    p.add_argument("--cold", type=int, default=1000)
    p.add_argument("--tracks", type=int, default=2000)
    p.add_argument("--dim", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train-embeddings", help="train UT-ALS or TT-SVD embeddings")
    _add_common(p)
    p.add_argument("--dim", type=int, default=None, help="default: the bundle space dim")
    p.add_argument("--iterations", type=int, default=15, help="ALS iterations")
    p.add_argument("--shift-k", type=float, default=1.0, help="SPPMI shift")
    p.set_defaults(func=cmd_train_embeddings)

    p = subs.add_parser("segment", help="cluster warm users and precompute top items")
    _add_common(p)
    p.add_argument("--k", "--clusters", dest="clusters", type=int, default=20)
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--metric", default="euclidean", choices=("euclidean", "cosine"))
    p.set_defaults(func=cmd_segment)

    p = subs.add_parser("build-features", help="assemble feature vectors for all users")
    _add_common(p)
    p.add_argument("--min-group-size", type=int, default=10)
    p.set_defaults(func=cmd_build_features)

    p = subs.add_parser("train-regressor", help="train the embedding regressor")
    _add_common(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train_regressor)

    p = subs.add_parser("recommend", help="produce recommendations for one split")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--strategy", default="semi", choices=STRATEGIES)
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--k", "--clusters", dest="clusters", type=int, default=20)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_recommend)

    p = subs.add_parser("evaluate", help="multi-seed offline evaluation")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--strategies", default=None, help="comma list, default all")
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--k", "--clusters", dest="clusters", type=int, default=20)
    p.add_argument("--split", default="test")
    p.add_argument("--seeds", type=int, default=10, help="number of retrain seeds")
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("report", help="render tables and figure CSVs")
    _add_common(p)
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--split", default="test")
    p.add_argument("--bucket-size", type=int, default=100)
    p.set_defaults(func=cmd_report)

    p = subs.add_parser("serve", help="run the HTTP inference service")
    _add_common(p)
    p.add_argument("--snapshot-dir", default=None)
    p.add_argument("--listen", default=None, help="host:port (env COLDREC_LISTEN)")
    p.set_defaults(func=cmd_serve)
    return parser


def _apply_config_overlay(args) -> None:
    """--config file values fill any flag still at its parser default."""
    if not args.config:
        args.config = None
        return
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        overlay = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON config: {exc}") from exc
    if not isinstance(overlay, dict):
        raise UsageError(f"{path}: config overlay must be a JSON object")
    parser = build_parser()
    defaults = {}
    for action in parser._subparsers._group_actions[0].choices[args.command]._actions:
        if action.dest not in ("help",):
            defaults[action.dest] = action.default
    for key, value in overlay.items():
        dest = key.replace("-", "_")
        if dest in ("synthetic",):
            continue  # nested sections consumed by specific stages
        if dest not in defaults:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        if getattr(args, dest) == defaults[dest]:
            setattr(args, dest, value)
    args.config = overlay


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("COLDREC_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_overlay(args)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, BundleFormatError, EmbeddingFormatError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, AssertionError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
