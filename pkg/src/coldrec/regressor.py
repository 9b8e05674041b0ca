"""Feedforward regressor mapping feature vectors into an embedding space.

Architecture per hidden layer: affine -> rectifier -> batch normalization
(normalization after the activation; a flag flips it to the more common
pre-activation placement). Linear output layer. Trained with mini-batch
SGD on the mean squared error against warm-user embeddings.

All arithmetic is float64; parameters are snapped to float32-representable
values at init and after training so the float32 container format
round-trips bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import EmbeddingTable, ValidationError

_BN_EPS = 1e-5
_MAGIC = b"RGR1"
_FORMAT_VERSION = 1


class ModelFormatError(Exception):
    """Model container is corrupt or truncated."""


class ModelVersionError(ModelFormatError):
    """Model container was written by an incompatible format version."""


class ModelNotTrainedError(RuntimeError):
    """Prediction requested from a model that was never trained."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; the learning rate is likely too high."""


@dataclass(frozen=True)
class RegressorSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (400, 300, 200)
    batchnorm: tuple[bool, ...] | None = None  # per hidden layer, default all on
    bn_after_activation: bool = True

    def __post_init__(self):
        dims = (self.input_dim, self.output_dim) + tuple(self.hidden)
        if any(d < 1 for d in dims):
            raise ValidationError(f"all layer dims must be >= 1: {dims}")
        if self.batchnorm is None:
            object.__setattr__(self, "batchnorm", tuple(True for _ in self.hidden))
        elif len(self.batchnorm) != len(self.hidden):
            raise ValidationError("batchnorm flags must match hidden layer count")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden, self.output_dim]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 512
    epochs: int = 100
    momentum: float = 0.0
    seed: int = 0
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0 and self.lr != 0.0:
            raise ValidationError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")


@dataclass
class RegressorModel:
    spec: RegressorSpec
    weights: list[np.ndarray]  # per layer, shape (out, in)
    biases: list[np.ndarray]
    bn_gamma: list[np.ndarray | None]  # per hidden layer, None when disabled
    bn_beta: list[np.ndarray | None]
    bn_mean: list[np.ndarray | None]  # running statistics
    bn_var: list[np.ndarray | None]
    seed: int
    epochs_trained: int = 0
    trained: bool = False
    channel_spec_version: str = ""
    metrics: dict[str, float] = field(default_factory=dict)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Differentiable parameters, in a fixed order."""
        out: list[tuple[str, np.ndarray]] = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        for i, (g, be) in enumerate(zip(self.bn_gamma, self.bn_beta)):
            if g is not None:
                out.append((f"bn_gamma{i}", g))
                out.append((f"bn_beta{i}", be))
        return out

    def _state_blocks(self) -> list[tuple[str, np.ndarray]]:
        blocks = self.parameters()
        for i, (m, v) in enumerate(zip(self.bn_mean, self.bn_var)):
            if m is not None:
                blocks.append((f"bn_mean{i}", m))
                blocks.append((f"bn_var{i}", v))
        return blocks


def _f32_snap(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _snap_model(model: RegressorModel) -> None:
    model.weights = [_f32_snap(w) for w in model.weights]
    model.biases = [_f32_snap(b) for b in model.biases]
    model.bn_gamma = [None if g is None else _f32_snap(g) for g in model.bn_gamma]
    model.bn_beta = [None if b is None else _f32_snap(b) for b in model.bn_beta]
    model.bn_mean = [None if m is None else _f32_snap(m) for m in model.bn_mean]
    model.bn_var = [None if v is None else _f32_snap(v) for v in model.bn_var]


def init_model(spec: RegressorSpec, seed: int = 0) -> RegressorModel:
    """Fan-in-scaled uniform weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for out_dim, in_dim in spec.layer_dims:
        bound = 1.0 / np.sqrt(in_dim)
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim))
    bn_gamma: list[np.ndarray | None] = []
    bn_beta: list[np.ndarray | None] = []
    bn_mean: list[np.ndarray | None] = []
    bn_var: list[np.ndarray | None] = []
    for h, flag in zip(spec.hidden, spec.batchnorm):
        bn_gamma.append(np.ones(h) if flag else None)
        bn_beta.append(np.zeros(h) if flag else None)
        bn_mean.append(np.zeros(h) if flag else None)
        bn_var.append(np.ones(h) if flag else None)
    model = RegressorModel(
        spec=spec,
        weights=weights,
        biases=biases,
        bn_gamma=bn_gamma,
        bn_beta=bn_beta,
        bn_mean=bn_mean,
        bn_var=bn_var,
        seed=seed,
    )
    _snap_model(model)
    return model


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _bn_forward(model, i, a, mode, bn_momentum, update_running):
    """Normalize one hidden layer's values; returns (out, info-or-None).

    info is None when the layer has no batch norm or a train-mode batch of
    one sample skipped it.
    """
    if model.bn_gamma[i] is None:
        return a, None
    if mode == "train":
        if len(a) <= 1:
            return a, None
        mu = a.mean(axis=0)
        var = a.var(axis=0)
        inv = 1.0 / np.sqrt(var + _BN_EPS)
        xhat = (a - mu) * inv
        if update_running:
            model.bn_mean[i] = bn_momentum * model.bn_mean[i] + (1 - bn_momentum) * mu
            model.bn_var[i] = bn_momentum * model.bn_var[i] + (1 - bn_momentum) * var
        info = {"a": a, "mu": mu, "inv": inv, "xhat": xhat, "batch": True}
    else:
        inv = 1.0 / np.sqrt(model.bn_var[i] + _BN_EPS)
        xhat = (a - model.bn_mean[i]) * inv
        info = {"inv": inv, "xhat": xhat, "batch": False}
    return model.bn_gamma[i] * xhat + model.bn_beta[i], info


def _bn_backward(model, i, dout, info, grads):
    """Gradient through one batch-norm layer (or its identity stand-ins)."""
    if model.bn_gamma[i] is None:
        return dout
    if info is None:
        # batch-of-one train step acted as identity
        grads[f"bn_gamma{i}"] = np.zeros_like(model.bn_gamma[i])
        grads[f"bn_beta{i}"] = np.zeros_like(model.bn_beta[i])
        return dout
    xhat = info["xhat"]
    grads[f"bn_gamma{i}"] = (dout * xhat).sum(axis=0)
    grads[f"bn_beta{i}"] = dout.sum(axis=0)
    dxhat = dout * model.bn_gamma[i]
    if not info["batch"]:
        return dxhat * info["inv"]
    a, mu, inv = info["a"], info["mu"], info["inv"]
    b = len(a)
    dvar = np.sum(dxhat * (a - mu) * (-0.5) * inv**3, axis=0)
    dmu = np.sum(-dxhat * inv, axis=0) + dvar * np.mean(-2.0 * (a - mu), axis=0)
    return dxhat * inv + dvar * 2.0 * (a - mu) / b + dmu / b


def _forward_batch(
    model: RegressorModel,
    x: np.ndarray,
    mode: str,
    bn_momentum: float = 0.9,
    update_running: bool = False,
    keep_cache: bool = False,
):
    """Batched forward pass; returns (output, cache-or-None).

    Train mode normalizes with batch statistics (skipping batches of one
    sample); infer mode uses running statistics.
    """
    if mode not in ("train", "infer"):
        raise ValidationError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ValidationError(
            f"input shape {x.shape} incompatible with input dim {model.spec.input_dim}"
        )
    after = model.spec.bn_after_activation
    cache: list[dict] = []
    h = x
    for i in range(len(model.spec.hidden)):
        z = h @ model.weights[i].T + model.biases[i]
        if after:
            relu_in = z
            rect = np.maximum(z, 0.0)
            out, bn = _bn_forward(model, i, rect, mode, bn_momentum, update_running)
        else:
            pre, bn = _bn_forward(model, i, z, mode, bn_momentum, update_running)
            relu_in = pre
            out = np.maximum(pre, 0.0)
        if keep_cache:
            cache.append({"x": h, "relu_in": relu_in, "bn": bn})
        h = out
    y = h @ model.weights[-1].T + model.biases[-1]
    if keep_cache:
        return y, {"layers": cache, "h_last": h}
    return y, None


def forward(model: RegressorModel, x: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Single-vector forward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"expected a single vector, got shape {x.shape}")
    y, _ = _forward_batch(model, x[None, :], mode)
    return y[0]


def _backward_batch(model, targets, y, cache):
    """Gradients of mean((y - t)^2) over batch x output dims."""
    b, d = y.shape
    grads: dict[str, np.ndarray] = {}
    dy = 2.0 * (y - targets) / (b * d)
    grads[f"w{len(model.weights) - 1}"] = dy.T @ cache["h_last"]
    grads[f"b{len(model.weights) - 1}"] = dy.sum(axis=0)
    dh = dy @ model.weights[-1]
    after = model.spec.bn_after_activation
    for i in range(len(model.spec.hidden) - 1, -1, -1):
        layer = cache["layers"][i]
        mask = layer["relu_in"] > 0.0
        if after:
            da = _bn_backward(model, i, dh, layer["bn"], grads)
            dz = da * mask
        else:
            dz = _bn_backward(model, i, dh * mask, layer["bn"], grads)
        grads[f"w{i}"] = dz.T @ layer["x"]
        grads[f"b{i}"] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ model.weights[i]
    return grads


def loss_and_gradients(
    model: RegressorModel, x: np.ndarray, targets: np.ndarray, mode: str = "train"
) -> tuple[float, dict[str, np.ndarray]]:
    """One full forward/backward on a fixed batch; running stats untouched."""
    y, cache = _forward_batch(model, x, mode, update_running=False, keep_cache=True)
    loss = float(np.mean((y - targets) ** 2))
    return loss, _backward_batch(model, targets, y, cache)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(
    model: RegressorModel,
    features: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[RegressorModel, list[tuple[int, float, float]]]:
    """Mini-batch SGD on the MSE; returns the model and the loss curve
    [(epoch, train_mse, val_mse)] with val_mse = nan when no split given.

    Deterministic given the config seed; the last incomplete batch is used.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(features) != len(targets) or len(features) == 0:
        raise ValidationError(
            f"features/targets misaligned: {features.shape} vs {targets.shape}"
        )
    rng = np.random.default_rng(cfg.seed)
    velocity: dict[str, np.ndarray] | None = None
    history: list[tuple[int, float, float]] = []
    n = len(features)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, tb = features[idx], targets[idx]
            y, cache = _forward_batch(
                model, xb, "train", bn_momentum=cfg.bn_momentum,
                update_running=True, keep_cache=True,
            )
            loss = float(np.mean((y - tb) ** 2))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: learning rate {cfg.lr} "
                    "is likely too high"
                )
            batch_losses.append(loss)
            grads = _backward_batch(model, tb, y, cache)
            params = dict(model.parameters())
            if cfg.momentum > 0.0:
                if velocity is None:
                    velocity = {k: np.zeros_like(v) for k, v in params.items()}
                for name, p in params.items():
                    velocity[name] = cfg.momentum * velocity[name] + grads[name]
                    p -= cfg.lr * velocity[name]
            else:
                for name, p in params.items():
                    p -= cfg.lr * grads[name]
        train_mse = float(np.mean(batch_losses))
        if validation is not None:
            yv, _ = _forward_batch(model, np.asarray(validation[0], dtype=np.float64), "infer")
            val_mse = float(np.mean((yv - np.asarray(validation[1])) ** 2))
        else:
            val_mse = float("nan")
        history.append((epoch, train_mse, val_mse))
    model.epochs_trained += cfg.epochs
    model.trained = True
    model.metrics["final_train_mse"] = history[-1][1]
    if validation is not None:
        model.metrics["final_val_mse"] = history[-1][2]
    _snap_model(model)
    return model, history


def predict_cold_embeddings(model: RegressorModel, features: EmbeddingTable) -> EmbeddingTable:
    """Infer-mode forward pass per user; output keyed by user id."""
    if not model.trained:
        raise ModelNotTrainedError("model has not been trained")
    if len(features) == 0:
        return EmbeddingTable.empty(model.spec.output_dim)
    y, _ = _forward_batch(model, features.vectors, "infer")
    return EmbeddingTable(features.ids, y)


def write_loss_curve(history: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for epoch, tr, va in history:
            fh.write(f"{epoch},{tr:.10g},{va:.10g}\n")


# ---------------------------------------------------------------------------
# container format
# ---------------------------------------------------------------------------


def save_model(model: RegressorModel, path: str | Path) -> None:
    """Versioned container: text header plus float32 parameter blocks."""
    blocks = model._state_blocks()
    header = {
        "format_version": _FORMAT_VERSION,
        "spec": {
            "input_dim": model.spec.input_dim,
            "output_dim": model.spec.output_dim,
            "hidden": list(model.spec.hidden),
            "batchnorm": list(model.spec.batchnorm),
            "bn_after_activation": model.spec.bn_after_activation,
        },
        "channel_spec_version": model.channel_spec_version,
        "seed": model.seed,
        "epochs_trained": model.epochs_trained,
        "trained": model.trained,
        "metrics": {k: model.metrics[k] for k in sorted(model.metrics)},
        "blocks": [[name, list(arr.shape)] for name, arr in blocks],
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _FORMAT_VERSION, len(payload)))
        fh.write(payload)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path: str | Path) -> RegressorModel:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != _MAGIC:
        raise ModelFormatError(f"{path}: bad magic")
    version, header_len = struct.unpack_from("<IQ", data, 4)
    if version != _FORMAT_VERSION:
        raise ModelVersionError(f"{path}: format version {version} unsupported")
    off = 16
    if len(data) < off + header_len:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header: {exc}") from exc
    off += header_len
    spec = RegressorSpec(
        input_dim=header["spec"]["input_dim"],
        output_dim=header["spec"]["output_dim"],
        hidden=tuple(header["spec"]["hidden"]),
        batchnorm=tuple(header["spec"]["batchnorm"]),
        bn_after_activation=header["spec"]["bn_after_activation"],
    )
    expected = sum(int(np.prod(shape)) for _, shape in header["blocks"])
    if len(data) != off + 4 * expected:
        raise ModelFormatError(
            f"{path}: header declares {expected} parameters, "
            f"file holds {(len(data) - off) // 4}"
        )
    arrays = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
        arrays[name] = arr.reshape(shape)
        off += 4 * count
    n_layers = len(spec.hidden) + 1
    model = RegressorModel(
        spec=spec,
        weights=[arrays[f"w{i}"] for i in range(n_layers)],
        biases=[arrays[f"b{i}"] for i in range(n_layers)],
        bn_gamma=[arrays.get(f"bn_gamma{i}") for i in range(len(spec.hidden))],
        bn_beta=[arrays.get(f"bn_beta{i}") for i in range(len(spec.hidden))],
        bn_mean=[arrays.get(f"bn_mean{i}") for i in range(len(spec.hidden))],
        bn_var=[arrays.get(f"bn_var{i}") for i in range(len(spec.hidden))],
        seed=header["seed"],
        epochs_trained=header["epochs_trained"],
        trained=header["trained"],
        channel_spec_version=header["channel_spec_version"],
        metrics=dict(header["metrics"]),
    )
    for i, (w, (out_dim, in_dim)) in enumerate(zip(model.weights, spec.layer_dims)):
        if w.shape != (out_dim, in_dim):
            raise ModelFormatError(
                f"{path}: block w{i} shape {w.shape} conflicts with spec "
                f"({out_dim}, {in_dim})"
            )
    return model
