"""SGD training loop with reduce-on-plateau and early stopping on validation loss."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import LabeledDataset, batch_iterator
from .functional import softmax_cross_entropy
from .model import ResEmoteNet
from .tensor import NonFiniteError, Parameter

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    plateau_threshold: float = 1e-4
    early_stop_patience: int = 5
    early_stop_min_delta: float = 0.0
    max_epochs: int = 80
    batch_size: int = 16
    seed: int = 0
    min_lr: float = 1e-7
    momentum: float = 0.0
    weight_decay: float = 0.0
    checkpoint_dir: str | None = None
    deterministic: bool = True

    def validate(self) -> None:
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0 or not self.min_lr > 0:
            raise ValueError("learning_rate and min_lr must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class NumericFailure(FloatingPointError):
    pass


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(parameters: Iterable[Parameter], lr: float, state: OptimizerState | None = None) -> None:
    """value <- value - lr * grad, then clear the gradients."""
    params = list(parameters)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    for p in params:
        g = p.grad
        if state is not None and state.weight_decay:
            g = g + state.weight_decay * p.data
        if state is not None and state.momentum:
            v = state.velocity.get(p.name)
            v = g if v is None else state.momentum * v + g
            state.velocity[p.name] = v
            g = v
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is caught by the caller's finiteness check
            p.data = (p.data - lr * g).astype(p.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------- schedule / stopping


@dataclass
class PlateauScheduler:
    lr: float
    factor: float = 0.1
    patience: int = 3
    threshold: float = 1e-4
    min_lr: float = 1e-7
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, val_loss: float) -> float:
        """Feed one epoch's validation loss; returns the (possibly reduced) learning rate."""
        if not math.isfinite(val_loss):
            raise ValueError(f"validation loss must be finite, got {val_loss}")
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
            return self.lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
        return self.lr


def scheduler_step(state: PlateauScheduler, val_loss: float) -> float:
    return state.step(val_loss)


def early_stop_check(history: Sequence[float], patience: int = 5, min_delta: float = 0.0) -> bool:
    """True once the best loss so far is ``patience`` or more epochs old."""
    if not history:
        raise ValueError("history must be nonempty")
    best, best_i = math.inf, -1
    for i, v in enumerate(history):
        if v < best - min_delta:
            best, best_i = v, i
    return len(history) - 1 - best_i >= patience


# ---------------------------------------------------------------- fit


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    seconds: float = 0.0


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    lr_events: list[dict] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    config: dict = field(default_factory=dict)

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    def to_dict(self, timing: bool = True) -> dict:
        epochs = [asdict(e) for e in self.epochs]
        if not timing:
            for e in epochs:
                e.pop("seconds")
        return {
            "epochs": epochs,
            "lr_events": self.lr_events,
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
            "config": self.config,
        }

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n"


@contextlib.contextmanager
def single_threaded(enabled: bool = True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def evaluate_loss(model: ResEmoteNet, dataset: LabeledDataset, batch_size: int) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode; restores the previous mode."""
    was_training = model.training
    model.eval()
    total, correct, n = 0.0, 0, 0
    try:
        for x, y in batch_iterator(dataset, batch_size, shuffle=False):
            logits = model(x)
            loss, _ = softmax_cross_entropy(logits, y)
            total += loss.item() * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            n += len(y)
    finally:
        model.training = was_training
    return total / n, correct / n


def _check_finite(model: ResEmoteNet) -> None:
    for p in model.params.values():
        if not np.isfinite(p.data).all():
            raise NonFiniteError(f"parameter {p.name!r} became non-finite after the update")


def fit(
    model: ResEmoteNet,
    train_ds: LabeledDataset,
    val_ds: LabeledDataset,
    config: TrainConfig | None = None,
) -> TrainReport:
    config = config or TrainConfig()
    config.validate()
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be nonempty")
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    report = TrainReport(config=config.to_dict())
    sched = PlateauScheduler(config.learning_rate, config.plateau_factor, config.plateau_patience,
                             config.plateau_threshold, config.min_lr)
    opt = OptimizerState(config.learning_rate, config.momentum, config.weight_decay)
    best_val = math.inf

    with single_threaded(config.deterministic):
        for epoch in range(config.max_epochs):
            start = time.perf_counter()
            model.train()
            lr = sched.lr
            loss_sum, seen = 0.0, 0
            for b, (x, y) in enumerate(batch_iterator(train_ds, config.batch_size, True, config.seed, epoch)):
                try:
                    loss, _ = softmax_cross_entropy(model(x), y)
                    model.zero_grad()
                    loss.backward()
                    sgd_step(model.parameters(), lr, opt)
                    _check_finite(model)
                except NonFiniteError as exc:
                    raise NumericFailure(f"non-finite values at epoch {epoch}, batch {b}, lr {lr:g}: {exc}") from exc
                loss_sum += loss.item() * len(y)
                seen += len(y)
            try:
                val_loss, val_acc = evaluate_loss(model, val_ds, config.batch_size)
            except NonFiniteError as exc:
                raise NumericFailure(f"non-finite values during validation after epoch {epoch}: {exc}") from exc
            new_lr = sched.step(val_loss)
            if new_lr != lr:
                report.lr_events.append({"epoch": epoch, "from": lr, "to": new_lr})
            if val_loss < best_val - config.early_stop_min_delta:
                best_val = val_loss
                report.best_epoch = epoch
                if ckpt_dir is not None:
                    save_checkpoint(model, ckpt_dir / "best.remn")
            if ckpt_dir is not None:
                save_checkpoint(model, ckpt_dir / "last.remn")
            report.epochs.append(EpochRecord(epoch, loss_sum / seen, val_loss, val_acc, lr, time.perf_counter() - start))
            log.info("epoch %d: train %.4f val %.4f acc %.4f lr %g", epoch, loss_sum / seen, val_loss, val_acc, lr)
            if early_stop_check(report.val_losses, config.early_stop_patience, config.early_stop_min_delta):
                report.stop_reason = "early-stop"
                break
        else:
            report.stop_reason = "max-epochs"
    return report
