"""Mini-batch training: softmax cross-entropy, Adam, patience-based early stopping."""

from __future__ import annotations

import csv
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .arch import Network, forward
from .errors import ConfigError, ContractError, IoError, NumericsError
from .tensor import Rng

log = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-5


@dataclass
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout: float = 0.6
    patience: int = 20
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def best_val_loss(self) -> float:
        return min(r.val_loss for r in self.records)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# loss and optimizer


def cross_entropy(probs, label: int) -> float:
    """``-ln(probs[label])`` with the probability clamped at 1e-12."""
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} outside {probs.shape[-1]} classes")
    return float(-np.log(max(float(probs[label]), 1e-12)))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        theta = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        theta -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(theta.dtype)


# ---------------------------------------------------------------------------
# early stopping


class EarlyStopping:
    """Tracks validation losses; an epoch improves if it beats the best by at least ``tol``."""

    def __init__(self, patience: int, tol: float = IMPROVEMENT_TOL):
        self.patience = patience
        self.tol = tol
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        self.epoch += 1
        if self.best - val_loss >= self.tol:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience

    @property
    def improved(self) -> bool:
        return self.stale == 0


def stop_epoch(val_losses, patience: int):
    """Epoch at which the rule stops (or None) and the best epoch, both 1-based."""
    es = EarlyStopping(patience)
    for loss in val_losses:
        if es.update(loss):
            return es.epoch, es.best_epoch
    return None, es.best_epoch


# ---------------------------------------------------------------------------
# training loop


def batch_loss(net: Network, frames, labels, mode="eval", rng=None, tape=None):
    logits = forward(net, frames, mode=mode, rng=rng, tape=tape)
    return L.softmax_cross_entropy(logits, labels)


def evaluate_loss(net: Network, frames, labels, batch_size=512):
    """Mean cross-entropy and accuracy with dropout disabled."""
    total, correct = 0.0, 0
    for lo in range(0, len(frames), batch_size):
        x, y = frames[lo : lo + batch_size], labels[lo : lo + batch_size]
        logits = forward(net, x, mode="eval")
        total += float(L.softmax_cross_entropy(logits, y)) * len(y)
        correct += int((np.argmax(logits, axis=1) == y).sum())
    n = len(frames)
    return total / n, correct / n


def train(net: Network, train_set, val_set, cfg: TrainConfig, progress=True):
    """Train a copy of ``net``; returns the best-validation network and the history.

    ``train_set`` and ``val_set`` are :class:`~modrec.dataset.Dataset` objects
    (anything with ``frames`` and ``labels`` arrays works).
    """
    if len(train_set.labels) == 0 or len(val_set.labels) == 0:
        raise ContractError("training and validation sets must be non-empty")
    if net.num_classes <= int(max(train_set.labels.max(), val_set.labels.max())):
        raise ConfigError("dataset labels exceed the network's class count")
    net = net.copy()
    net.spec = net.spec.with_dropout(cfg.dropout)
    rng = Rng(cfg.seed)
    state = AdamState()
    stopper = EarlyStopping(cfg.patience)
    history = TrainHistory()
    best_params = {k: v.copy() for k, v in net.params.items()}
    x_train = np.asarray(train_set.frames, dtype=net.dtype)
    y_train = np.asarray(train_set.labels, dtype=np.int64)
    x_val = np.asarray(val_set.frames, dtype=net.dtype)
    y_val = np.asarray(val_set.labels, dtype=np.int64)
    n = len(y_train)
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        epoch_rng = rng.split(epoch)
        order = epoch_rng.permutation(n)
        running = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            step += 1
            tape = L.GradTape()
            loss = batch_loss(net, x_train[idx], y_train[idx], "train", epoch_rng.split(step), tape)
            grads = L.backward(tape, loss)
            tape.release()
            try:
                adam_step(net.params, grads, state, cfg)
            except NumericsError as exc:
                raise NumericsError(str(exc), epoch=epoch) from exc
            running += float(loss.value) * len(idx)
        val_loss, val_acc = evaluate_loss(net, x_val, y_val)
        if not math.isfinite(val_loss):
            raise NumericsError("validation loss is not finite", epoch=epoch)
        record = EpochRecord(epoch, running / n, val_loss, val_acc, time.perf_counter() - start)
        history.records.append(record)
        stop = stopper.update(val_loss)
        if stopper.improved:
            best_params = {k: v.copy() for k, v in net.params.items()}
        if progress:
            print(
                f"epoch {epoch:3d} train_loss {record.train_loss:.4f} val_loss {val_loss:.4f} "
                f"val_acc {val_acc:.4f} ({record.seconds:.1f}s)",
                file=sys.stderr,
                flush=True,
            )
        if stop:
            history.stop_reason = "patience"
            break
    else:
        history.stop_reason = "max-epochs"
    history.best_epoch = stopper.best_epoch
    net.params = best_params
    return net, history


# ---------------------------------------------------------------------------
# history export

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "seconds")


def export_history(history: TrainHistory, path) -> None:
    if not history.records:
        raise ContractError("history has no epochs")
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_COLUMNS)
            for r in history.records:
                writer.writerow(
                    [r.epoch] + [f"{getattr(r, c):.9g}" for c in HISTORY_COLUMNS[1:]]
                )
    except OSError as exc:
        raise IoError(f"cannot write history to {path}: {exc}") from exc


def read_history(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochRecord(int(r["epoch"]), *(float(r[c]) for c in HISTORY_COLUMNS[1:])) for r in rows
    ]
