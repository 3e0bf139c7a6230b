from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .dataset import Splits
from .features import FeatureCache
from .layers import ShapeError
from .model import BiLGNet
from .output import append_jsonl

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    plateau_factor: float = 0.7
    plateau_patience: int = 7
    # accuracy points; 1e-3 is 0.1 percentage point
    plateau_min_delta: float = 1e-3
    seed: int = 0
    # None keeps the rate the model was built with
    dropout_rate: Optional[float] = None
    standardize: bool = False

    def __post_init__(self) -> None:
        if not (0.0 < self.plateau_factor < 1.0):
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.plateau_patience < 1:
            raise ValueError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.plateau_min_delta < 0:
            raise ValueError(f"plateau_min_delta must be >= 0, got {self.plateau_min_delta}")
        if self.dropout_rate is not None and not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    learning_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


def scce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean sparse categorical cross-entropy with probabilities floored at 1e-12."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(f"probs {probs.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        bad = labels[(labels < 0) | (labels >= probs.shape[1])][0]
        raise ValueError(f"label {bad} outside 0..{probs.shape[1] - 1}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("probability rows must sum to 1")
    picked = probs[np.arange(len(labels)), labels].astype(np.float64)
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamState":
        return cls(beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to `params` in place."""
    if params.keys() != grads.keys():
        raise ShapeError(f"params and grads name different arrays: {sorted(params.keys() ^ grads.keys())}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"{name}: grad shape {grads[name].shape} != param shape {p.shape}")
        for moments in (state.m, state.v):
            if name in moments and moments[name].shape != p.shape:
                raise ShapeError(f"{name}: optimizer state shape {moments[name].shape} != param shape {p.shape}")

    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype, copy=False)
    return params, state


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by `factor` after `patience` epochs without a `min_delta` gain."""

    lr: float = 0.001
    factor: float = 0.7
    patience: int = 7
    min_delta: float = 1e-3
    best: float = -math.inf
    wait: int = 0
    reductions: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "PlateauScheduler":
        return cls(lr=cfg.learning_rate, factor=cfg.plateau_factor, patience=cfg.plateau_patience, min_delta=cfg.plateau_min_delta)

    def step(self, metric: float) -> float:
        if metric > self.best + self.min_delta:
            self.best = metric
            self.wait = 0
            return self.lr
        self.wait += 1
        if self.wait >= self.patience:
            old = self.lr
            self.lr *= self.factor
            self.wait = 0
            self.reductions += 1
            log.warning("plateau lr %.6g -> %.6g (best val_acc=%.4f)", old, self.lr, self.best)
        return self.lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best"] = None if math.isinf(self.best) else self.best
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "PlateauScheduler":
        best = raw.get("best")
        return cls(**{**raw, "best": -math.inf if best is None else float(best)})


def plateau_scheduler(
    history: Sequence[float],
    lr: float = 0.001,
    factor: float = 0.7,
    patience: int = 7,
    min_delta: float = 1e-3,
) -> float:
    """Learning rate after replaying a validation-accuracy history."""
    sched = PlateauScheduler(lr=lr, factor=factor, patience=patience, min_delta=min_delta)
    for acc in history:
        sched.step(acc)
    return sched.lr


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        flat = X.reshape(-1, X.shape[-1]).astype(np.float64)
        std = flat.std(axis=0)
        std[std < 1e-8] = 1.0
        return cls(mean=flat.mean(axis=0).astype(np.float32), std=std.astype(np.float32))

    def transform(self, X: np.ndarray) -> np.ndarray:
        if X.shape[-1] != self.mean.shape[0]:
            raise ShapeError(f"standardizer fitted on {self.mean.shape[0]} features, got {X.shape[-1]}")
        return ((X - self.mean) / self.std).astype(X.dtype, copy=False)


@dataclass
class TrainState:
    """Everything beyond the model weights that a resumed run needs."""

    epoch: int
    adam: AdamState
    scheduler: PlateauScheduler
    standardizer: Optional[Standardizer] = None
    history: List[EpochStats] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        return cls(epoch=0, adam=AdamState.from_config(cfg), scheduler=PlateauScheduler.from_config(cfg))


def predict(model: BiLGNet, X: np.ndarray, batch_size: int = 32, standardizer: Optional[Standardizer] = None) -> np.ndarray:
    """Inference-mode class probabilities for a stack of feature matrices."""
    if standardizer is not None and len(X):
        X = standardizer.transform(X)
    return model.predict_proba(X, batch_size=batch_size)


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def fit(
    model: BiLGNet,
    cache: FeatureCache,
    splits: Splits,
    cfg: TrainConfig,
    state: Optional[TrainState] = None,
    log_path: str | Path | None = None,
    on_epoch: Optional[Callable[[BiLGNet, TrainState], None]] = None,
) -> TrainState:
    """Train `model` in place from `state.epoch` up to `cfg.max_epochs`.

    Shuffling and dropout masks are derived from (seed, epoch), so a run resumed
    from a saved state continues exactly as the uninterrupted run would have.
    """
    if not splits.train:
        raise TrainingError("empty train split")
    if not splits.val:
        raise TrainingError("empty validation split")
    if cache.dims != model.cfg.input_dims:
        raise TrainingError(f"feature dims {cache.dims} do not match model input_dims {model.cfg.input_dims}")

    X_train, y_train, _ = cache.arrays(splits.train)
    X_val, y_val, _ = cache.arrays(splits.val)
    return fit_arrays(model, X_train, y_train, X_val, y_val, cfg, state=state, log_path=log_path, on_epoch=on_epoch)


def fit_arrays(
    model: BiLGNet,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    cfg: TrainConfig,
    state: Optional[TrainState] = None,
    log_path: str | Path | None = None,
    on_epoch: Optional[Callable[[BiLGNet, TrainState], None]] = None,
) -> TrainState:
    if len(y_train) == 0 or len(y_val) == 0:
        raise TrainingError("empty train or validation split")
    if X_train.shape[-1] != model.cfg.input_dims:
        raise TrainingError(f"feature dims {X_train.shape[-1]} do not match model input_dims {model.cfg.input_dims}")

    if cfg.dropout_rate is not None and cfg.dropout_rate != model.cfg.dropout_rate:
        log.info("fit dropout_rate %g -> %g", model.cfg.dropout_rate, cfg.dropout_rate)
        model.set_dropout_rate(cfg.dropout_rate)

    state = state or TrainState.fresh(cfg)
    if cfg.standardize and state.standardizer is None:
        state.standardizer = Standardizer.fit(X_train)
    if state.standardizer is not None:
        X_train = state.standardizer.transform(X_train)
        X_val = state.standardizer.transform(X_val)

    n = len(y_train)
    log.info("fit train=%d val=%d epochs=%d->%d batch=%d", n, len(y_val), state.epoch, cfg.max_epochs, cfg.batch_size)

    for epoch in range(state.epoch, cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        model.set_dropout_rng(np.random.default_rng([cfg.seed, epoch, 1]))
        lr = state.scheduler.lr
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = X_train[idx], y_train[idx]
            probs = model.forward(xb, train=True)
            loss_sum += scce_loss(probs, yb) * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == yb))
            onehot = np.zeros_like(probs)
            onehot[np.arange(len(idx)), yb] = 1.0
            model.backward_logits((probs - onehot) / len(idx))
            adam_step(model.named_parameters(), model.named_gradients(), state.adam, lr)

        val_acc = accuracy(model.predict_proba(X_val, cfg.batch_size), y_val)
        stats = EpochStats(
            epoch=epoch + 1,
            train_loss=loss_sum / n,
            train_accuracy=correct / n,
            val_accuracy=val_acc,
            learning_rate=lr,
        )
        state.scheduler.step(val_acc)
        state.history.append(stats)
        state.epoch = epoch + 1
        log.info(
            "epoch=%d loss=%.4f train_acc=%.4f val_acc=%.4f lr=%.6g",
            stats.epoch,
            stats.train_loss,
            stats.train_accuracy,
            stats.val_accuracy,
            stats.learning_rate,
        )
        if log_path is not None:
            append_jsonl(log_path, stats.to_dict())
        if on_epoch is not None:
            on_epoch(model, state)
        if not np.isfinite(stats.train_loss):
            raise TrainingError(f"training diverged at epoch {stats.epoch} (loss {stats.train_loss})")

    return state
