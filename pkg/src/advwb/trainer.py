"""Class-weighted cross-entropy training with Adam and early stopping."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import ShapeError, TrainingDiverged
from .model import predict
from .tensor import PrngState, Tensor, Tape, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    adam_epsilon: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    max_epochs: int = 300
    patience: int = 40
    min_delta: float = 0.001
    batch_size: int = 64
    seed: int = 0
    epoch_subsample_fraction: float = 1.0
    validation_fraction: float = 0.2

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.epoch_subsample_fraction <= 1:
            raise ValueError("epoch_subsample_fraction must be in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")

    def to_dict(self):
        return asdict(self)


def compute_class_weights(labels, k):
    """Inverse-frequency weights normalized to mean 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=k)[:k]
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no samples; inverse-frequency weight undefined")
    w = 1.0 / counts
    return (w / w.mean()).astype(np.float32)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update, in place.

    ``params`` and ``grads`` map names to arrays (or Tensors).  The epsilon
    is added to sqrt(v_hat), outside the root.
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        value = p.data if isinstance(p, Tensor) else p
        g = grads[name]
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {value.shape}", axis=name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        value -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_epsilon)
    return params, state


# ---------------------------------------------------------------------------
# early stopping


@dataclass
class EarlyStopState:
    patience: int = 40
    min_delta: float = 0.001
    best_metric: float = -math.inf
    epochs_since_improvement: int = 0
    best_seen: float = -math.inf
    best_weights: dict = None
    best_epoch: int = -1


def early_stop_update(state, metric, weights=None, epoch=None):
    """Feed one epoch's metric; return ``"continue"`` or ``"stop"``.

    An improvement (metric > best + min_delta) resets the patience counter.
    Independently, the weight snapshot follows the highest metric seen, so
    restoring it always recovers the best validation score.
    """
    if metric is None or not math.isfinite(metric):
        raise ValueError(f"early-stopping metric must be finite, got {metric}")
    if metric > state.best_metric + state.min_delta:
        state.best_metric = metric
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    if metric > state.best_seen:
        state.best_seen = metric
        state.best_epoch = epoch if epoch is not None else state.best_epoch + 1
        if weights is not None:
            state.best_weights = {k: np.array(v, copy=True) for k, v in weights.items()}
    return "stop" if state.epochs_since_improvement >= state.patience else "continue"


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)  # dicts: epoch, train_loss, train_acc, val_acc
    stopped_early: bool = False
    best_epoch: int = -1
    best_val_acc: float = float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
            for r in self.rows:
                w.writerow([r["epoch"], f"{r['train_loss']:.6g}", f"{r['train_acc']:.6g}", f"{r['val_acc']:.6g}"])


def split_train_val(n, fraction, seed):
    """Seeded shuffle, then the first (1 - fraction) for training."""
    order = PrngState(seed).child("split").permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def accuracy(model, images, labels):
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(model, images) == labels))


def train(model, dataset, config, val_dataset=None, progress=None):
    """Fit ``model`` in place; returns ``(model, history)``.

    Without ``val_dataset`` the training pool is split 80/20 by a seeded
    shuffle.  Shuffling, subsampling and dropout all draw from streams
    keyed on ``config.seed``, so a run is reproducible bit for bit.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if val_dataset is None:
        tr_idx, va_idx = split_train_val(len(dataset), config.validation_fraction, config.seed)
        train_set, val_set = dataset.subset(tr_idx), dataset.subset(va_idx)
    else:
        train_set, val_set = dataset, val_dataset
    k = model.config.class_count
    weights = compute_class_weights(train_set.labels, k)
    x_all = train_set.images.astype(model.params["stem.weight"].dtype, copy=False)
    y_all = train_set.labels

    state = AdamState()
    stopper = EarlyStopState(config.patience, config.min_delta)
    history = TrainingHistory()
    root = PrngState(config.seed).child("train")
    params = model.params

    for epoch in range(1, config.max_epochs + 1):
        erng = root.child(epoch)
        order = erng.child("shuffle").permutation(len(y_all))
        if config.epoch_subsample_fraction < 1.0:
            order = order[: max(1, int(len(order) * config.epoch_subsample_fraction))]
        total_loss, correct, seen = 0.0, 0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb, yb = Tensor(x_all[idx]), y_all[idx]
            for p in params.values():
                p.grad = None
            with Tape() as tape:
                logits = model.forward(xb, training=True, rng=erng.child("dropout", b))
                loss, probs = ops.softmax_cross_entropy(logits, yb, weights)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b}; try a lower learning rate")
            backward(loss, tape)
            adam_step(params, {n: p.grad for n, p in params.items()}, state, config)
            total_loss += value * len(idx)
            correct += int((probs.argmax(axis=1) == yb).sum())
            seen += len(idx)

        val_acc = accuracy(model, val_set.images, val_set.labels) if len(val_set) else correct / seen
        row = {"epoch": epoch, "train_loss": total_loss / seen, "train_acc": correct / seen, "val_acc": val_acc}
        history.rows.append(row)
        decision = early_stop_update(stopper, val_acc, model.state_dict(), epoch)
        msg = f"epoch {epoch:3d} loss {row['train_loss']:.4f} train_acc {row['train_acc']:.4f} val_acc {val_acc:.4f}"
        log.info(msg)
        if progress is not None:
            progress(msg)
        if decision == "stop":
            history.stopped_early = True
            break

    if stopper.best_weights is not None:
        model.load_state_dict(stopper.best_weights)
    history.best_epoch = stopper.best_epoch
    history.best_val_acc = stopper.best_seen
    model.metadata["training"] = {
        "config": config.to_dict(),
        "epochs_run": len(history.rows),
        "best_epoch": stopper.best_epoch,
        "best_val_acc": stopper.best_seen,
        "class_weights": [float(w) for w in weights],
    }
    return model, history
