"""Warm embedding spaces: weighted implicit-feedback ALS and SVD of a
shifted positive PMI track co-occurrence matrix, plus derived entity and
user vectors obtained by averaging track embeddings.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .core import Catalog, EmbeddingTable, MeanResult, ValidationError, mean_embedding
from .events import SIGNALS, InteractionLog, UnknownSignalError

DEFAULT_SIGNAL_WEIGHTS = {"stream": 1.0, "favorite": 2.0}


class ConditioningWarning(UserWarning):
    """Normal equations are poorly conditioned despite the ridge term."""


class RankDeficiencyWarning(UserWarning):
    """Requested factorization rank exceeds the numerical rank."""


# ---------------------------------------------------------------------------
# user-track affinity matrix
# ---------------------------------------------------------------------------


class AffinityMatrix:
    """Sparse nonnegative user x track affinity scores."""

    def __init__(self, user_ids: Sequence[int], track_ids: Sequence[int], matrix: sp.spmatrix):
        self.user_ids = np.asarray(user_ids, dtype=np.int64)
        self.track_ids = np.asarray(track_ids, dtype=np.int64)
        m = sp.csr_matrix(matrix, dtype=np.float64)
        m.eliminate_zeros()
        if m.shape != (len(self.user_ids), len(self.track_ids)):
            raise ValidationError(
                f"matrix shape {m.shape} vs {len(self.user_ids)} users x {len(self.track_ids)} tracks"
            )
        if m.nnz and (m.data.min() < 0 or not np.all(np.isfinite(m.data))):
            raise ValidationError("affinity scores must be finite and >= 0")
        self.matrix = m

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def score(self, user: int, track: int) -> float:
        u = int(np.searchsorted(self.user_ids, user))
        t = int(np.searchsorted(self.track_ids, track))
        if u >= len(self.user_ids) or self.user_ids[u] != user:
            return 0.0
        if t >= len(self.track_ids) or self.track_ids[t] != track:
            return 0.0
        return float(self.matrix[u, t])


def build_affinity_matrix(
    log: InteractionLog,
    catalog: Catalog,
    weights: Mapping[str, float] | None = None,
) -> AffinityMatrix:
    """score(u, t) = w_stream * #streams(u, t) + w_fav * 1[t, its album or
    its artist was favorited by u].

    Weight keys must be known signal types; weights must be nonnegative.
    """
    weights = dict(DEFAULT_SIGNAL_WEIGHTS if weights is None else weights)
    for sig, w in weights.items():
        if sig not in SIGNALS:
            raise UnknownSignalError(f"unknown signal type in weights: {sig!r}")
        if w < 0:
            raise ValidationError(f"weight for {sig!r} must be >= 0, got {w}")
    w_stream = weights.get("stream", 0.0)
    w_fav = weights.get("favorite", 0.0)

    scores: dict[tuple[int, int], float] = {}
    for user in log.users():
        if w_stream:
            for track, n in log.stream_counts(user).items():
                if track in catalog.meta:
                    scores[(user, track)] = scores.get((user, track), 0.0) + w_stream * n
        if w_fav:
            fav_tracks: set[int] = set()
            for ev in log.for_user(user):
                if ev.signal != "favorite":
                    continue
                if ev.level == "track" and ev.entity in catalog.meta:
                    fav_tracks.add(ev.entity)
                elif ev.level == "album":
                    fav_tracks.update(catalog.album_tracks(ev.entity))
                elif ev.level == "artist":
                    fav_tracks.update(catalog.artist_tracks(ev.entity))
            for track in fav_tracks:
                scores[(user, track)] = scores.get((user, track), 0.0) + w_fav

    user_ids = sorted({u for u, _ in scores} | set(log.users()))
    track_ids = catalog.sorted_tracks()
    uidx = {u: i for i, u in enumerate(user_ids)}
    tidx = {t: i for i, t in enumerate(track_ids)}
    keys = sorted(scores)
    rows = [uidx[u] for u, _ in keys]
    cols = [tidx[t] for _, t in keys]
    vals = [scores[k] for k in keys]
    m = sp.csr_matrix(
        (vals, (rows, cols)), shape=(len(user_ids), len(track_ids)), dtype=np.float64
    )
    return AffinityMatrix(user_ids, track_ids, m)


# ---------------------------------------------------------------------------
# weighted implicit-feedback ALS
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlsConfig:
    dim: int = 256
    l2: float = 0.1
    alpha: float = 40.0
    iterations: int = 15
    seed: int = 0
    cond_threshold: float = 1e12

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")
        if self.l2 < 0 or self.alpha < 0:
            raise ValidationError("l2 and alpha must be >= 0")


def _solve_side(mat: sp.csr_matrix, other: np.ndarray, l2: float, alpha: float,
                cond_threshold: float) -> np.ndarray:
    """Ridge solve of one ALS half-step.

    Row r of the result minimizes sum_i c_ri (p_ri - x.y_i)^2 + l2 |x|^2
    with confidence c = 1 + alpha*score and preference p = 1[score > 0].
    """
    n, _ = mat.shape
    d = other.shape[1]
    gram = other.T @ other + l2 * np.eye(d)
    if np.linalg.cond(gram) > cond_threshold:
        warnings.warn(
            "ALS normal equations conditioning exceeds threshold", ConditioningWarning
        )
    out = np.zeros((n, d))
    indptr, indices, data = mat.indptr, mat.indices, mat.data
    for r in range(n):
        lo, hi = indptr[r], indptr[r + 1]
        if lo == hi:
            continue
        cols = indices[lo:hi]
        conf = alpha * data[lo:hi]
        f = other[cols]
        a = gram + f.T @ (conf[:, None] * f)
        b = f.T @ (1.0 + conf)
        out[r] = np.linalg.solve(a, b)
    return out


def _als_objective(mat: sp.csr_matrix, x: np.ndarray, y: np.ndarray,
                   l2: float, alpha: float) -> float:
    """Exact weighted objective sum_{u,i} c_ui (p_ui - x_u.y_i)^2 + ridge."""
    # all-pairs part with c=1, p=0: trace(X^T X Y^T Y)
    total = float(np.sum((x @ (y.T @ y)) * x))
    coo = mat.tocoo()
    if coo.nnz:
        pred = np.einsum("ij,ij->i", x[coo.row], y[coo.col])
        c = 1.0 + alpha * coo.data
        # replace the c=1,p=0 contribution of observed cells by c,p=1
        total += float(np.sum(c - 2.0 * c * pred + (c - 1.0) * pred**2))
    total += l2 * (float(np.sum(x**2)) + float(np.sum(y**2)))
    return total


def train_als(
    m: AffinityMatrix, cfg: AlsConfig
) -> tuple[EmbeddingTable, EmbeddingTable, list[float]]:
    """Alternating ridge solves on the implicit-feedback objective.

    Returns (user table, track table, objective value after each half-step).
    The objective is asserted non-increasing at every half-step.
    """
    if m.nnz == 0:
        raise ValidationError("affinity matrix is empty")
    n, t = m.shape
    if cfg.dim > min(n, t):
        raise ValidationError(f"dim {cfg.dim} exceeds matrix dimensions {m.shape}")
    rng = np.random.default_rng(cfg.seed)
    x = np.zeros((n, cfg.dim))
    y = rng.standard_normal((t, cfg.dim)) * 0.1
    mat = m.matrix
    mat_t = sp.csr_matrix(mat.T)
    history = [_als_objective(mat, x, y, cfg.l2, cfg.alpha)]
    for _ in range(cfg.iterations):
        x = _solve_side(mat, y, cfg.l2, cfg.alpha, cfg.cond_threshold)
        history.append(_als_objective(mat, x, y, cfg.l2, cfg.alpha))
        y = _solve_side(mat_t, x, cfg.l2, cfg.alpha, cfg.cond_threshold)
        history.append(_als_objective(mat, x, y, cfg.l2, cfg.alpha))
        for prev, cur in zip(history[-3:], history[-2:]):
            if cur > prev * (1 + 1e-9) + 1e-9:
                raise AssertionError(
                    f"ALS objective increased: {prev} -> {cur}"
                )
    users = EmbeddingTable(m.user_ids, x)
    tracks = EmbeddingTable(m.track_ids, y)
    return users, tracks, history


# ---------------------------------------------------------------------------
# track-track co-occurrence and SPPMI
# ---------------------------------------------------------------------------


class CooccurrenceCounts:
    """Symmetric track x track co-occurrence counts."""

    def __init__(self, track_ids: Sequence[int], matrix: sp.spmatrix):
        self.track_ids = np.asarray(track_ids, dtype=np.int64)
        m = sp.csr_matrix(matrix, dtype=np.float64)
        m.eliminate_zeros()
        if (abs(m - m.T)).nnz:
            raise ValidationError("co-occurrence counts must be symmetric")
        if m.nnz and m.data.min() < 0:
            raise ValidationError("co-occurrence counts must be >= 0")
        self.matrix = m

    @property
    def marginals(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    @property
    def total(self) -> float:
        return float(self.matrix.sum())

    @classmethod
    def from_pair_counts(
        cls, track_ids: Sequence[int], counts: Mapping[tuple[int, int], float]
    ) -> "CooccurrenceCounts":
        """Build from {(i, j): count}; missing mirror entries are filled in."""
        ids = sorted(track_ids)
        idx = {t: k for k, t in enumerate(ids)}
        sym: dict[tuple[int, int], float] = {}
        for (i, j), c in counts.items():
            sym[(i, j)] = sym.get((i, j), 0.0) + c
            if i != j and (j, i) not in counts:
                sym[(j, i)] = sym.get((j, i), 0.0) + c
        keys = sorted(sym)
        rows = [idx[i] for i, _ in keys]
        cols = [idx[j] for _, j in keys]
        vals = [sym[k] for k in keys]
        m = sp.csr_matrix((vals, (rows, cols)), shape=(len(ids), len(ids)))
        return cls(ids, m)


def count_cooccurrences(collections: Iterable[Sequence[int]]) -> CooccurrenceCounts:
    """Count co-occurring track pairs within each collection (e.g. playlist).

    Each unordered pair of distinct tracks sharing a collection adds one
    count to both symmetric cells. The collection source is pluggable;
    pass ``catalog.playlists.values()`` for playlist co-occurrence.
    """
    pair_counts: dict[tuple[int, int], float] = {}
    all_ids: set[int] = set()
    for coll in collections:
        uniq = sorted(set(coll))
        all_ids.update(uniq)
        for a in range(len(uniq)):
            for b in range(a + 1, len(uniq)):
                key = (uniq[a], uniq[b])
                pair_counts[key] = pair_counts.get(key, 0.0) + 1.0
    return CooccurrenceCounts.from_pair_counts(sorted(all_ids), pair_counts)


@dataclass(frozen=True)
class SppmiMatrix:
    track_ids: np.ndarray
    matrix: sp.csr_matrix

    @property
    def order(self) -> int:
        return self.matrix.shape[0]


def build_sppmi(counts: CooccurrenceCounts, shift_k: float = 1.0) -> SppmiMatrix:
    """entry(i, j) = max(log(N * c_ij / (c_i * c_j)) - log(shift_k), 0)."""
    if shift_k < 1:
        raise ValidationError(f"shift_k must be >= 1, got {shift_k}")
    n_total = counts.total
    if n_total <= 0:
        raise ValidationError("total co-occurrence mass must be > 0")
    marg = counts.marginals
    coo = counts.matrix.tocoo()
    vals = np.log(n_total * coo.data / (marg[coo.row] * marg[coo.col])) - np.log(shift_k)
    keep = vals > 0
    m = sp.csr_matrix(
        (vals[keep], (coo.row[keep], coo.col[keep])),
        shape=counts.matrix.shape,
    )
    return SppmiMatrix(counts.track_ids.copy(), m)


# ---------------------------------------------------------------------------
# truncated SVD embeddings
# ---------------------------------------------------------------------------

_DENSE_CUTOFF = 2048


def _randomized_svd(a: sp.spmatrix, d: int, rng: np.random.Generator,
                    oversample: int = 10, n_iter: int = 7):
    k = min(d + oversample, min(a.shape))
    q = rng.standard_normal((a.shape[1], k))
    y = a @ q
    for _ in range(n_iter):
        y, _ = np.linalg.qr(a.T @ y)
        y, _ = np.linalg.qr(a @ y)
    q, _ = np.linalg.qr(y)
    b = q.T @ a
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    return (q @ ub)[:, :d], s[:d], vt[:d]


def _canonicalize_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Make the largest-|component| of each left singular vector positive."""
    u = u.copy()
    vt = vt.copy()
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            vt[j, :] = -vt[j, :]
    return u, vt


def train_svd_embeddings(
    s: SppmiMatrix, d: int, seed: int = 0, scaling: str = "usqrt"
) -> EmbeddingTable:
    """Truncated SVD S ~ U Sigma V^T; embedding rows per ``scaling``:
    "u" = U, "us" = U Sigma, "usqrt" = U Sigma^(1/2) (default).

    Deterministic given the seed; singular-vector signs are canonicalized.
    Dimensions past the numerical rank become zero columns with a warning.
    """
    if d < 1:
        raise ValidationError(f"d must be >= 1, got {d}")
    if d > s.order:
        raise ValidationError(f"d {d} exceeds matrix order {s.order}")
    if scaling not in ("u", "us", "usqrt"):
        raise ValidationError(f"unknown scaling {scaling!r}")
    if s.order <= _DENSE_CUTOFF:
        u, sig, vt = np.linalg.svd(s.matrix.toarray())
        u, sig, vt = u[:, :d], sig[:d], vt[:d]
    else:
        rng = np.random.default_rng(seed)
        u, sig, vt = _randomized_svd(s.matrix, d, rng)
    tol = (sig[0] if len(sig) else 0.0) * s.order * np.finfo(np.float64).eps
    deficient = sig <= tol
    if deficient.any():
        warnings.warn(
            f"requested d={d} exceeds numerical rank {int((~deficient).sum())}; "
            "padding with zero columns",
            RankDeficiencyWarning,
        )
        sig = np.where(deficient, 0.0, sig)
        u[:, deficient] = 0.0
    u, _ = _canonicalize_signs(u, vt)
    if scaling == "u":
        emb = u
    elif scaling == "us":
        emb = u * sig
    else:
        emb = u * np.sqrt(sig)
    return EmbeddingTable(s.track_ids, emb)


# ---------------------------------------------------------------------------
# derived embeddings
# ---------------------------------------------------------------------------


def derive_entity_embedding(
    level: str, entity_id: int, tracks: EmbeddingTable, catalog: Catalog
) -> MeanResult:
    """Mean of the member-track embeddings of an artist, album or playlist."""
    if level == "artist":
        members = catalog.artist_tracks(entity_id)
    elif level == "album":
        members = catalog.album_tracks(entity_id)
    elif level == "playlist":
        members = catalog.playlist_tracks(entity_id)
    else:
        raise ValidationError(f"cannot derive embedding for level {level!r}")
    return mean_embedding(list(members), tracks)


def build_entity_tables(
    catalog: Catalog, tracks: EmbeddingTable
) -> dict[str, EmbeddingTable]:
    """Embedding tables for every entity level, derived from track vectors.

    Entities whose members carry no embeddings get no row (feature channels
    then fall back to null blocks).
    """
    out = {"track": tracks}
    levels = {
        "artist": catalog.artists(),
        "album": sorted({m.album_id for m in catalog.meta.values()}),
        "playlist": sorted(catalog.playlists),
    }
    for level, ids in levels.items():
        rows = {}
        for eid in ids:
            res = derive_entity_embedding(level, eid, tracks, catalog)
            if not res.is_null:
                rows[eid] = res.vector
        out[level] = EmbeddingTable.from_dict(rows, dim=tracks.dim)
    return out


def warm_user_embedding_from_history(
    user: int,
    log: InteractionLog,
    tracks: EmbeddingTable,
    count_weighted: bool = True,
) -> MeanResult:
    """Mean of streamed-track embeddings over the user's listening history.

    Weighted by stream count by default; set ``count_weighted=False`` for a
    distinct-track mean.
    """
    counts = log.stream_counts(user)
    ids: list[int] = []
    for track in sorted(counts):
        ids.extend([track] * (counts[track] if count_weighted else 1))
    return mean_embedding(ids, tracks)
