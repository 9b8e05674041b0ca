"""HTTP inference service: cold-user embedding prediction, segment
assignment and recommendation over an immutable published snapshot.

Reload follows read-copy-update: a candidate snapshot is built and fully
validated aside, then published with one atomic reference swap, so every
request is served entirely by a single snapshot version.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .core import Demographics, EmbeddingTable, ValidationError
from .embio import read_embeddings, write_embeddings
from .events import Event, UnknownSignalError
from .features import ChannelSpec, GroupEmbeddings, assemble_features
from .recommend import recommend_full_personalized, recommend_semi_personalized
from .regressor import RegressorModel, forward, load_model, save_model
from .segmentation import Segmentation, load_segmentation, save_segmentation

logger = logging.getLogger("coldrec.service")

_ENTITY_LEVELS = ("track", "artist", "album", "playlist")

SNAPSHOT_FILES = (
    "model.rgr",
    "channel_spec.json",
    "groups.json",
    "segmentation.seg",
    "tracks.emb1",
    "artists.emb1",
    "albums.emb1",
    "playlists.emb1",
)


class SnapshotError(Exception):
    """Snapshot directory failed validation; the old snapshot stays live."""


class BadRequest(Exception):
    """Client error; message goes into the 400 response body."""


@dataclass(frozen=True)
class ServingSnapshot:
    version: str
    model: RegressorModel
    channel_spec: ChannelSpec
    groups: GroupEmbeddings
    segmentation: Segmentation
    entity_tables: dict[str, EmbeddingTable]

    @classmethod
    def load(cls, path: str | Path) -> "ServingSnapshot":
        root = Path(path)
        missing = [f for f in SNAPSHOT_FILES if not (root / f).exists()]
        if missing:
            raise SnapshotError(f"{root}: missing snapshot files {missing}")
        try:
            model = load_model(root / "model.rgr")
            channel_spec = ChannelSpec.load(root / "channel_spec.json")
            groups = GroupEmbeddings.load(root / "groups.json")
            segmentation = load_segmentation(root / "segmentation.seg")
            entity_tables = {
                level: read_embeddings(root / f"{level}s.emb1")
                for level in _ENTITY_LEVELS
            }
        except Exception as exc:
            raise SnapshotError(f"{root}: unreadable snapshot: {exc}") from exc
        digest = hashlib.sha256()
        for name in SNAPSHOT_FILES:
            digest.update((root / name).read_bytes())
        snap = cls(
            version=digest.hexdigest()[:12],
            model=model,
            channel_spec=channel_spec,
            groups=groups,
            segmentation=segmentation,
            entity_tables=entity_tables,
        )
        snap.validate()
        return snap

    def validate(self) -> None:
        d = self.channel_spec.dim
        for level, table in sorted(self.entity_tables.items()):
            if table.dim != d:
                raise SnapshotError(
                    f"{level} embeddings dim {table.dim} != channel spec dim {d}"
                )
        if self.groups.dim != d:
            raise SnapshotError(f"group embeddings dim {self.groups.dim} != {d}")
        if self.model.spec.input_dim != self.channel_spec.total_dim:
            raise SnapshotError(
                f"model input dim {self.model.spec.input_dim} != channel spec "
                f"total dim {self.channel_spec.total_dim}"
            )
        out_d = self.model.spec.output_dim
        if self.segmentation.dim != out_d:
            raise SnapshotError(
                f"segmentation dim {self.segmentation.dim} != model output dim {out_d}"
            )
        if self.entity_tables["track"].dim != out_d:
            raise SnapshotError(
                f"track embedding dim {self.entity_tables['track'].dim} != model "
                f"output dim {out_d}"
            )
        if not self.model.trained:
            raise SnapshotError("snapshot model is not trained")
        if not self.segmentation.global_top:
            raise SnapshotError("segmentation carries no global popularity list")


def write_snapshot(
    path: str | Path,
    model: RegressorModel,
    channel_spec: ChannelSpec,
    groups: GroupEmbeddings,
    segmentation: Segmentation,
    entity_tables: dict[str, EmbeddingTable],
) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    save_model(model, root / "model.rgr")
    channel_spec.save(root / "channel_spec.json")
    groups.save(root / "groups.json")
    save_segmentation(segmentation, root / "segmentation.seg")
    for level in _ENTITY_LEVELS:
        write_embeddings(entity_tables[level], root / f"{level}s.emb1")


# ---------------------------------------------------------------------------
# request handling
# ---------------------------------------------------------------------------


def _parse_events(payload: dict) -> list[Event]:
    raw = payload.get("events", [])
    if not isinstance(raw, list):
        raise BadRequest("'events' must be a list")
    events = []
    for item in raw:
        if not isinstance(item, dict):
            raise BadRequest("each event must be an object")
        try:
            events.append(
                Event(
                    user=0,
                    day=0,
                    signal=item.get("signal"),
                    level=item.get("level"),
                    entity=int(item["entity_id"]),
                    count=int(item.get("count", 1)),
                )
            )
        except UnknownSignalError as exc:
            raise BadRequest(str(exc)) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise BadRequest(f"malformed event: {exc}") from exc
    return events


def _parse_demographics(payload: dict) -> Demographics:
    country = payload.get("country")
    age = payload.get("age")
    if country is not None and not isinstance(country, str):
        raise BadRequest("'country' must be a string or null")
    if age is not None and not isinstance(age, int):
        raise BadRequest("'age' must be an integer or null")
    return Demographics(country=country, age=age)


class ServiceApp:
    """Snapshot holder plus the logic behind each endpoint."""

    def __init__(self, snapshot: ServingSnapshot | None = None):
        self._snapshot = snapshot
        self._reload_lock = threading.Lock()
        self.started = time.monotonic()

    @property
    def snapshot(self) -> ServingSnapshot | None:
        return self._snapshot

    def embed(self, payload: dict, snap: ServingSnapshot) -> dict:
        events = _parse_events(payload)
        demo = _parse_demographics(payload)
        try:
            fv = assemble_features(
                0, events, 0, snap.entity_tables, snap.groups, snap.channel_spec, demo
            )
            vec = forward(snap.model, fv.values, mode="infer")
        except ValidationError as exc:
            # snapshot-internal inconsistency surfaced by this body
            raise SnapshotMismatch(str(exc)) from exc
        return {
            "embedding": [float(v) for v in vec],
            "snapshot_version": snap.version,
        }

    def recommend(self, payload: dict, snap: ServingSnapshot) -> dict:
        k = payload.get("k", 50)
        if not isinstance(k, int) or k < 1:
            raise BadRequest(f"'k' must be an integer >= 1, got {k!r}")
        strategy = payload.get("strategy", "semi")
        if strategy not in ("semi", "full"):
            raise BadRequest(f"'strategy' must be 'semi' or 'full', got {strategy!r}")
        embedded = self.embed(payload, snap)
        vec = np.array(embedded["embedding"])
        if strategy == "semi":
            rec = recommend_semi_personalized(0, vec, snap.segmentation, k)
        else:
            rec = recommend_full_personalized(
                0, vec, snap.entity_tables["track"], k,
                popularity=snap.segmentation.global_top,
            )
        out = {
            "tracks": [int(t) for t, _ in rec.items],
            "scores": [float(s) for _, s in rec.items],
            "snapshot_version": snap.version,
        }
        if rec.segment is not None:
            out["segment_id"] = int(rec.segment)
        return out

    def reload(self, payload: dict) -> dict:
        path = payload.get("snapshot_dir")
        if not isinstance(path, str):
            raise BadRequest("'snapshot_dir' must be a path string")
        with self._reload_lock:
            old = self._snapshot
            new = ServingSnapshot.load(path)  # fully validated aside
            self._snapshot = new  # atomic publication
        logger.info("reloaded snapshot %s -> %s", old.version if old else None, new.version)
        return {
            "old_version": old.version if old else None,
            "new_version": new.version,
        }

    def health(self) -> dict:
        snap = self._snapshot
        return {
            "status": "ok" if snap is not None else "degraded",
            "snapshot_version": snap.version if snap else None,
            "uptime_seconds": round(time.monotonic() - self.started, 3),
        }


class SnapshotMismatch(Exception):
    """Body is valid but conflicts with the loaded snapshot's dimensions."""


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def app(self) -> ServiceApp:
        return self.server.app  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):
        logger.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b""
        try:
            payload = json.loads(raw.decode("utf-8")) if raw else {}
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BadRequest(f"body is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise BadRequest("body must be a JSON object")
        return payload

    def do_GET(self):
        if self.path == "/health":
            self._send(200, self.app.health())
        else:
            self._send(404, {"error": f"unknown path {self.path}"})

    def do_POST(self):
        try:
            payload = self._read_json()
            if self.path == "/admin/reload":
                try:
                    self._send(200, self.app.reload(payload))
                except SnapshotError as exc:
                    self._send(409, {"error": str(exc)})
                return
            if self.path not in ("/v1/embed", "/v1/recommend"):
                self._send(404, {"error": f"unknown path {self.path}"})
                return
            snap = self.app.snapshot
            if snap is None:
                self._send(503, {"error": "no snapshot loaded"})
                return
            if self.path == "/v1/embed":
                self._send(200, self.app.embed(payload, snap))
            else:
                self._send(200, self.app.recommend(payload, snap))
        except BadRequest as exc:
            self._send(400, {"error": str(exc)})
        except SnapshotMismatch as exc:
            self._send(422, {"error": str(exc)})
        except Exception as exc:  # pragma: no cover - defensive
            logger.exception("internal error")
            self._send(500, {"error": f"internal error: {exc}"})


def make_server(host: str, port: int, app: ServiceApp) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), _Handler)
    server.app = app  # type: ignore[attr-defined]
    return server


def serve(
    snapshot_dir: str | Path | None,
    host: str = "127.0.0.1",
    port: int = 8080,
) -> None:
    """Run the service until interrupted; starts degraded when no snapshot
    directory is given."""
    app = ServiceApp(ServingSnapshot.load(snapshot_dir) if snapshot_dir else None)
    server = make_server(host, port, app)
    version = app.snapshot.version if app.snapshot else "none"
    logger.info("serving on %s:%d (snapshot %s)", host, port, version)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
