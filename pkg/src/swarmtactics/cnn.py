"""From-scratch 1-D convolutional classifier over engagement time series.

Architecture: repeated blocks of (same-padding Conv1d, ReLU, ceil-mode max
pool, inverted dropout), then a global average pool over time and one affine
layer to class logits. All math is float64 numpy. Reverse-mode gradients are
exact with respect to both the weights and the input, which feeds the
saliency maps and the trajectory optimizer.

Tensor layout is [batch, time, channels]; conv weights are [kernel, c_in,
c_out].
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datasets import LabeledDataset, ScalerStats
from . import fileio

logger = logging.getLogger(__name__)

__all__ = [
    "CnnSpec",
    "CnnModel",
    "TrainConfig",
    "TrainHistory",
    "EvalMetrics",
    "PRESETS",
    "preset_spec",
    "train",
    "evaluate",
    "predict_proba",
    "loss_and_gradients",
    "probability_input_gradient",
    "saliency_map",
    "normalized_error_rate",
    "save_model",
    "load_model",
    "write_history_csv",
]


@dataclass(frozen=True)
class CnnSpec:
    """Shape of the classifier: one entry in filters/kernels per conv block."""

    window: int
    features: int
    filters: tuple[int, ...]
    kernels: tuple[int, ...]
    pool: int
    dropout: float
    classes: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if self.window < 1 or self.features < 1 or self.classes < 2:
            raise ValueError("window/features/classes out of range")
        if len(self.filters) != len(self.kernels) or not self.filters:
            raise ValueError("filters and kernels must be equal-length, nonempty")
        if any(f < 1 for f in self.filters) or any(k < 1 for k in self.kernels):
            raise ValueError("filters and kernels must be >= 1")
        if self.pool < 1:
            raise ValueError("pool must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_blocks(self) -> int:
        return len(self.filters)

    def block_lengths(self) -> list[int]:
        """Sequence length entering each block, plus the final length."""
        lengths = [self.window]
        for _ in self.filters:
            lengths.append(math.ceil(lengths[-1] / self.pool))
        return lengths


def preset_spec(name: str, features: int) -> CnnSpec:
    try:
        builder = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of "
                         f"{sorted(PRESETS)}") from None
    return builder(features)


PRESETS: dict[str, Callable[[int], CnnSpec]] = {
    # Single light block for the defender-number axis.
    "defender_number": lambda f: CnnSpec(20, f, (32,), (7,), 5, 0.1),
    # Deeper stack for motion-family discrimination.
    "defender_motion": lambda f: CnnSpec(20, f, (64, 64, 64), (7, 5, 3), 3, 0.4),
    # Same stack over a longer window for the noise axis.
    "noise": lambda f: CnnSpec(50, f, (64, 64, 64), (7, 5, 3), 3, 0.4),
}


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _init_params(spec: CnnSpec, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    c_in = spec.features
    for i, (c_out, k) in enumerate(zip(spec.filters, spec.kernels)):
        scale = math.sqrt(2.0 / (k * c_in))  # He init for ReLU blocks
        params[f"conv{i}_w"] = rng.normal(0.0, scale, size=(k, c_in, c_out))
        params[f"conv{i}_b"] = np.zeros(c_out)
        c_in = c_out
    limit = math.sqrt(6.0 / (c_in + spec.classes))
    params["dense_w"] = rng.uniform(-limit, limit, size=(c_in, spec.classes))
    params["dense_b"] = np.zeros(spec.classes)
    return params


@dataclass
class CnnModel:
    """Spec plus parameter dict. Construct fresh ones with :meth:`init`."""

    spec: CnnSpec
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, spec: CnnSpec, seed: int = 0) -> "CnnModel":
        return cls(spec=spec, params=_init_params(spec, seed))

    def copy(self) -> "CnnModel":
        return CnnModel(self.spec, {k: v.copy() for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padding stride-1 conv. x [B,T,C_in], w [K,C_in,C_out]."""
    k = w.shape[0]
    pad_l = (k - 1) // 2
    pad_r = k - 1 - pad_l
    xp = np.pad(x, ((0, 0), (pad_l, pad_r), (0, 0)))
    # windows: [B, T, C_in, K] -> [B, T, K, C_in]
    win = sliding_window_view(xp, k, axis=1).transpose(0, 1, 3, 2)
    bsz, t = x.shape[0], x.shape[1]
    cols = win.reshape(bsz * t, k * w.shape[1])
    out = cols @ w.reshape(k * w.shape[1], w.shape[2]) + b
    return out.reshape(bsz, t, w.shape[2]), (cols, x.shape, (pad_l, pad_r))


def _conv_backward(dout: np.ndarray, w: np.ndarray, cache):
    cols, x_shape, (pad_l, pad_r) = cache
    k, c_in, c_out = w.shape
    bsz, t, _ = x_shape
    dflat = dout.reshape(bsz * t, c_out)
    dw = (cols.T @ dflat).reshape(k, c_in, c_out)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(k * c_in, c_out).T).reshape(bsz, t, k, c_in)
    dxp = np.zeros((bsz, t + pad_l + pad_r, c_in))
    for j in range(k):
        dxp[:, j:j + t, :] += dcols[:, :, j, :]
    return dxp[:, pad_l:pad_l + t, :], dw, db


def _pool_forward(x: np.ndarray, pool: int):
    """Ceil-mode max pool over time: output length ceil(T / pool)."""
    if pool == 1:
        return x, None
    bsz, t, c = x.shape
    t_out = math.ceil(t / pool)
    padded = np.full((bsz, t_out * pool, c), -np.inf)
    padded[:, :t, :] = x
    blocks = padded.reshape(bsz, t_out, pool, c)
    idx = np.argmax(blocks, axis=2)
    out = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, (idx, t, pool)


def _pool_backward(dout: np.ndarray, cache):
    if cache is None:
        return dout
    idx, t, pool = cache
    bsz, t_out, c = dout.shape
    dpad = np.zeros((bsz, t_out, pool, c))
    np.put_along_axis(dpad, idx[:, :, None, :], dout[:, :, None, :], axis=2)
    return dpad.reshape(bsz, t_out * pool, c)[:, :t, :]


def _dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None):
    """Inverted dropout; identity when rate is 0 or rng is None (inference)."""
    if rate == 0.0 or rng is None:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(x: np.ndarray, model: CnnModel,
             rng: np.random.Generator | None = None):
    """Returns (logits, caches). rng enables dropout (training mode)."""
    spec = model.spec
    if x.ndim != 3 or x.shape[1] != spec.window or x.shape[2] != spec.features:
        raise ValueError(f"input must be [B, {spec.window}, {spec.features}], "
                         f"got {x.shape}")
    h = np.asarray(x, dtype=np.float64)
    caches = []
    for i in range(spec.n_blocks):
        w, b = model.params[f"conv{i}_w"], model.params[f"conv{i}_b"]
        z, conv_cache = _conv_forward(h, w, b)
        relu_mask = z > 0.0
        h = z * relu_mask
        h, pool_cache = _pool_forward(h, spec.pool)
        h, drop_mask = _dropout_forward(h, spec.dropout, rng)
        caches.append((conv_cache, relu_mask, pool_cache, drop_mask))
    t_final = h.shape[1]
    pooled = h.mean(axis=1)
    logits = pooled @ model.params["dense_w"] + model.params["dense_b"]
    caches.append((pooled, t_final))
    return logits, caches


def _backward(dlogits: np.ndarray, model: CnnModel, caches):
    """Gradients of a scalar whose dlogits is given. Returns (grads, dx)."""
    spec = model.spec
    pooled, t_final = caches[-1]
    grads = {
        "dense_w": pooled.T @ dlogits,
        "dense_b": dlogits.sum(axis=0),
    }
    dpooled = dlogits @ model.params["dense_w"].T
    dh = np.repeat(dpooled[:, None, :], t_final, axis=1) / t_final
    for i in reversed(range(spec.n_blocks)):
        conv_cache, relu_mask, pool_cache, drop_mask = caches[i]
        if drop_mask is not None:
            dh = dh * drop_mask
        dh = _pool_backward(dh, pool_cache)
        dh = dh * relu_mask
        dh, dw, db = _conv_backward(dh, model.params[f"conv{i}_w"], conv_cache)
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db
    return grads, dh


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _crop(values: np.ndarray, window: int) -> np.ndarray:
    if values.shape[1] < window:
        raise ValueError(f"instances have {values.shape[1]} rows but the model "
                         f"window is {window}; regenerate with longer engagements")
    return values[:, :window, :]


def predict_proba(model: CnnModel, values: np.ndarray,
                  chunk: int = 512) -> np.ndarray:
    """Class probabilities for [B, T, F] inputs (T >= window; extra rows are
    cropped). Inference mode: dropout off."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    x = _crop(values, model.spec.window)
    outs = []
    for lo in range(0, x.shape[0], chunk):
        logits, _ = _forward(x[lo:lo + chunk], model)
        outs.append(_softmax(logits))
    return np.concatenate(outs, axis=0)


def loss_and_gradients(model: CnnModel, x: np.ndarray, labels: np.ndarray,
                       rng: np.random.Generator | None = None):
    """Mean cross-entropy over the batch and its exact gradients.

    Returns (loss, param grads, input grad). Softmax and loss are folded so
    dlogits = (p - onehot) / B.
    """
    labels = np.asarray(labels)
    logits, caches = _forward(x, model, rng=rng)
    probs = _softmax(logits)
    n = x.shape[0]
    p_true = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(p_true, 1e-300))))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads, dx = _backward(dlogits, model, caches)
    return loss, grads, dx


def probability_input_gradient(model: CnnModel, x: np.ndarray,
                               class_index: int) -> np.ndarray:
    """d p_class / d input for a single [T, F] instance, inference mode."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    logits, caches = _forward(_crop(x, model.spec.window), model)
    probs = _softmax(logits)
    # dp_k/dz = p_k (e_k - p)
    dlogits = -probs[:, class_index:class_index + 1] * probs
    dlogits[:, class_index] += probs[:, class_index]
    _, dx = _backward(dlogits, model, caches)
    return dx[0] if single else dx


def saliency_map(model: CnnModel, x: np.ndarray, label: int,
                 aggregate_agents: bool = False) -> np.ndarray:
    """|d p_label / d input| over the model window.

    With ``aggregate_agents`` the four channels of each agent block are
    summed, giving a [window, N_agents] map.
    """
    grad = np.abs(probability_input_gradient(model, x, int(label)))
    if not aggregate_agents:
        return grad
    t, f = grad.shape
    if f % 4 != 0:
        raise ValueError("per-agent aggregation needs feature blocks of 4")
    return grad.reshape(t, f // 4, 4).sum(axis=2)


def normalized_error_rate(accuracy: float, n_classes: int) -> float:
    """(1 - accuracy) / (1 - 1/n): 0 is perfect, 1 matches random guessing."""
    return (1.0 - accuracy) / (1.0 - 1.0 / n_classes)


@dataclass
class EvalMetrics:
    n: int
    accuracy: float
    ner: float
    confusion: np.ndarray  # [classes, classes] true x predicted
    per_class_accuracy: dict[int, float]


def evaluate(model: CnnModel, ds: LabeledDataset, chunk: int = 512) -> EvalMetrics:
    probs = predict_proba(model, ds.values, chunk=chunk)
    pred = probs.argmax(axis=1)
    labels = ds.labels
    n_classes = model.spec.classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    accuracy = float((pred == labels).mean())
    per_class = {}
    for c in range(n_classes):
        total = confusion[c].sum()
        per_class[c] = float(confusion[c, c] / total) if total else float("nan")
    return EvalMetrics(n=int(labels.size), accuracy=accuracy,
                       ner=normalized_error_rate(accuracy, n_classes),
                       confusion=confusion, per_class_accuracy=per_class)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10  # epochs without val-loss improvement before stopping
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate/batch_size/max_epochs out of range")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def append(self, epoch: int, tl: float, vl: float, va: float) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(tl)
        self.val_loss.append(vl)
        self.val_accuracy.append(va)


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        corr1 = 1.0 - c.beta1 ** self.t
        corr2 = 1.0 - c.beta2 ** self.t
        for key, g in grads.items():
            self.m[key] = c.beta1 * self.m[key] + (1.0 - c.beta1) * g
            self.v[key] = c.beta2 * self.v[key] + (1.0 - c.beta2) * (g * g)
            m_hat = self.m[key] / corr1
            v_hat = self.v[key] / corr2
            params[key] -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)


def _dataset_loss(model: CnnModel, values: np.ndarray, labels: np.ndarray,
                  chunk: int = 512) -> tuple[float, float]:
    """(mean loss, accuracy) in inference mode."""
    total, correct = 0.0, 0
    for lo in range(0, values.shape[0], chunk):
        x = values[lo:lo + chunk]
        y = labels[lo:lo + chunk]
        logits, _ = _forward(x, model)
        probs = _softmax(logits)
        p_true = probs[np.arange(x.shape[0]), y]
        total += float(-np.log(np.maximum(p_true, 1e-300)).sum())
        correct += int((probs.argmax(axis=1) == y).sum())
    n = values.shape[0]
    return total / n, correct / n


def train(spec: CnnSpec, train_ds: LabeledDataset, val_ds: LabeledDataset,
          config: TrainConfig = TrainConfig()) -> tuple[CnnModel, TrainHistory]:
    """Adam with early stopping on validation loss; returns the best-val model.

    Both datasets must already be standardized with the shared scaler and at
    least as long as the spec window (extra rows are cropped). Raises
    RuntimeError if the loss goes non-finite.
    """
    if train_ds.n_features != spec.features or val_ds.n_features != spec.features:
        raise ValueError(f"spec expects {spec.features} features, datasets have "
                         f"{train_ds.n_features}/{val_ds.n_features}")
    x_train = _crop(train_ds.values, spec.window).astype(np.float64)
    y_train = train_ds.labels
    x_val = _crop(val_ds.values, spec.window).astype(np.float64)
    y_val = val_ds.labels
    if np.any(y_train >= spec.classes) or np.any(y_val >= spec.classes):
        raise ValueError("labels exceed the spec class count")

    rng = np.random.default_rng(config.seed)
    model = CnnModel.init(spec, seed=config.seed)
    opt = _Adam(model.params, config)
    history = TrainHistory()
    best_val = math.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    since_best = 0
    n = x_train.shape[0]
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        running, seen = 0.0, 0
        for lo in range(0, n, config.batch_size):
            sel = order[lo:lo + config.batch_size]
            loss, grads, _ = loss_and_gradients(model, x_train[sel],
                                                y_train[sel], rng=rng)
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"training loss became non-finite at epoch {epoch}; "
                    f"lower the learning rate or check the input scaling")
            opt.step(model.params, grads)
            running += loss * sel.size
            seen += sel.size
        val_loss, val_acc = _dataset_loss(model, x_val, y_val)
        if not math.isfinite(val_loss):
            raise RuntimeError(f"validation loss became non-finite at epoch {epoch}")
        history.append(epoch, running / seen, val_loss, val_acc)
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in model.params.items()}
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                history.stopped_early = True
                break
    model.params = best_params
    logger.info("training done: %d epochs, best epoch %d (val loss %.4f)",
                len(history.epochs), history.best_epoch, best_val)
    return model, history


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for row in zip(history.epochs, history.train_loss, history.val_loss,
                       history.val_accuracy):
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_model(model: CnnModel, scaler: ScalerStats, path,
               meta: dict | None = None) -> None:
    """Model weights plus the scaler they were trained behind."""
    spec = model.spec
    header = {
        "kind": "model",
        "spec": {"window": spec.window, "features": spec.features,
                 "filters": list(spec.filters), "kernels": list(spec.kernels),
                 "pool": spec.pool, "dropout": spec.dropout,
                 "classes": spec.classes},
        "param_names": sorted(model.params),
        "scaler_fingerprint": scaler.fingerprint(),
        "meta": meta or {},
    }
    blobs = {f"param/{k}": model.params[k] for k in sorted(model.params)}
    blobs["scaler/mean"] = scaler.mean
    blobs["scaler/var"] = scaler.var
    fileio.write_container(path, fileio.MODEL_MAGIC, header, blobs)


def load_model(path) -> tuple[CnnModel, ScalerStats, dict]:
    header, blobs = fileio.read_container(path, fileio.MODEL_MAGIC)
    try:
        s = header["spec"]
        spec = CnnSpec(window=s["window"], features=s["features"],
                       filters=tuple(s["filters"]), kernels=tuple(s["kernels"]),
                       pool=s["pool"], dropout=s["dropout"],
                       classes=s["classes"])
        params = {name: blobs[f"param/{name}"] for name in header["param_names"]}
        scaler = ScalerStats(mean=blobs["scaler/mean"], var=blobs["scaler/var"])
    except KeyError as exc:
        raise fileio.FormatError(f"model file missing {exc}", section=str(exc))
    return CnnModel(spec=spec, params=params), scaler, header.get("meta", {})
