"""Training loop, loss, Adam, learning-rate schedule, evaluation, transfer."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, batch_indices
from .model import STTreeModel
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """NaN/inf loss or gradient during training."""


class LabelRangeError(ValueError):
    pass


class TransferError(RuntimeError):
    """Checkpoint cannot seed the target model."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    decay_steps: int = 5
    decay_rate: float = 0.90
    lr_schedule: str = "staircase"  # or "compound"
    patience: int | None = None  # None disables early stopping
    val_fraction: float = 0.2
    clip_norm: float | None = 5.0
    seed: int = 0
    no_tree: bool = False
    no_attention: bool = False

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be >= 1")
        if self.lr_schedule not in ("staircase", "compound"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.patience is not None and self.patience < 0:
            raise ValueError("patience must be >= 0")


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_val: float = 0.0
    best_epoch: int = 0
    patience_counter: int = 0
    lr: float = 0.0
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


# ---------------------------------------------------------------------------


def cross_entropy(y_hat: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class; probabilities floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    b, m = y_hat.shape
    if labels.shape != (b,):
        raise LabelRangeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= m:
        raise LabelRangeError(f"label outside [0, {m})")
    p = T.getitem(y_hat, (np.arange(b), labels))
    floor = Tensor(np.maximum(1e-12 - p.data, 0.0))  # lifts p to 1e-12 without a gradient path
    return T.mul(T.mean(T.log(T.add(p, floor))), -1.0)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Staircase decay: base * rate ** floor((epoch - 1) / steps)."""
    if epoch < 1:
        raise ValueError("epoch counts from 1")
    return cfg.learning_rate * cfg.decay_rate ** ((epoch - 1) // cfg.decay_steps)


def _compound_next(lr: float, epoch: int, cfg: TrainConfig) -> float:
    # literal per-epoch update: lr <- lr * rate ** (e / steps)
    return lr * cfg.decay_rate ** (epoch / cfg.decay_steps)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def adam_step(named_params, state: TrainState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; gradients are cleared afterwards."""
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None


def evaluate(model: STTreeModel, ds: Dataset, batch_size: int = 64) -> dict:
    """Accuracy, per-class accuracy and mean loss of a frozen model."""
    probs = model.predict_proba(ds.values, batch_size)
    pred = np.argmax(probs, axis=1)
    labels = ds.labels
    per_class = []
    for c in range(ds.num_classes):
        mask = labels == c
        per_class.append(float(np.mean(pred[mask] == c)) if mask.any() else float("nan"))
    p_true = np.maximum(probs[np.arange(len(labels)), labels], 1e-12)
    return {
        "accuracy": float(np.mean(pred == labels)),
        "per_class_accuracy": per_class,
        "mean_loss": float(-np.mean(np.log(p_true))),
        "predictions": pred,
    }


def train_step(model: STTreeModel, x: np.ndarray, y: np.ndarray, state: TrainState,
               lr: float, clip_norm: float | None) -> tuple[float, np.ndarray]:
    try:
        out = model(Tensor(x))
    except T.NonFiniteError as exc:
        raise NumericError(str(exc)) from None
    loss = cross_entropy(out.y_hat, y)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError("non-finite loss")
    T.backward(loss)
    if clip_norm is not None:
        clip_grad_norm(model.parameters(), clip_norm)
    adam_step(model.named_parameters(), state, lr)
    return value, np.argmax(out.y_hat.data, axis=1)


def train(model: STTreeModel, train_ds: Dataset, val_ds: Dataset | None, cfg: TrainConfig,
          metrics_path=None, progress=None) -> tuple[STTreeModel, TrainState]:
    """Mini-batch training with optional validation-driven early stopping.

    When ``val_ds`` is given the parameters from the best validation epoch
    are restored at the end.
    """
    cfg.validate()
    state = TrainState(lr=cfg.learning_rate)
    best_params = None
    n = len(train_ds)
    lr = cfg.learning_rate
    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_schedule == "staircase":
            lr = lr_at(epoch, cfg)
        state.lr = lr
        total_loss = 0.0
        correct = 0
        for b, idx in enumerate(batch_indices(n, cfg.batch_size, cfg.seed, True, epoch)):
            try:
                loss, pred = train_step(model, train_ds.values[idx], train_ds.labels[idx], state,
                                        lr, cfg.clip_norm)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
            total_loss += loss * len(idx)
            correct += int(np.sum(pred == train_ds.labels[idx]))
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total_loss / n,
            "train_acc": correct / n,
            "val_acc": float("nan"),
        }
        state.epoch = epoch
        stop = False
        if val_ds is not None and len(val_ds):
            val_acc = evaluate(model, val_ds)["accuracy"]
            row["val_acc"] = val_acc
            if val_acc > state.best_val:
                state.best_val = val_acc
                state.best_epoch = epoch
                state.patience_counter = 0
                best_params = model.store.state_dict()
            else:
                state.patience_counter += 1
            if cfg.patience is not None and state.patience_counter > cfg.patience:
                stop = True
        state.history.append(row)
        if progress is not None:
            progress(row)
        log.debug("epoch %d lr=%.6g loss=%.4f acc=%.3f val=%.3f", epoch, lr,
                  row["train_loss"], row["train_acc"], row["val_acc"])
        if stop:
            state.stopped_early = True
            break
        if cfg.lr_schedule == "compound":
            lr = _compound_next(lr, epoch, cfg)
    if best_params is not None:
        model.store.load_state_dict(best_params)
    if metrics_path is not None:
        write_metrics_csv(state.history, metrics_path)
    return model, state


def write_metrics_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc"])
        for r in history:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["train_acc"]),
                        repr(r["val_acc"])])


def transfer_parameters(model: STTreeModel, state: dict[str, np.ndarray]) -> list[str]:
    """Copy encoder tensors from ``state`` except the input-dependent patch embedding.

    The logits head is copied only when the class count matches; otherwise it
    keeps its fresh initialization. All checks run before anything is
    written, so a failure leaves ``model`` untouched. Returns the copied names.
    """
    wanted = [n for n in model.store.names()
              if n.startswith("encoder.") and not n.startswith("encoder.patch_embed.")]
    bad = []
    copy = []
    for name in wanted:
        target = model.store[name].shape
        if name not in state:
            bad.append(f"{name} (missing)")
        elif tuple(np.shape(state[name])) != target:
            if name.startswith("encoder.logits_head."):
                continue
            bad.append(f"{name} {tuple(np.shape(state[name]))} != {target}")
        else:
            copy.append(name)
    if bad:
        raise TransferError("incompatible tensors: " + "; ".join(bad))
    for name in copy:
        model.store[name].data = np.array(state[name], dtype=np.float64)
    return copy


def fine_tune(model: STTreeModel, checkpoint_path, train_ds: Dataset, val_ds: Dataset | None,
              cfg: TrainConfig, metrics_path=None) -> tuple[STTreeModel, TrainState]:
    """Seed ``model`` (fresh patch embedding and tree) from a checkpoint, then train."""
    from .checkpoint import CheckpointError, load_checkpoint

    try:
        _, state, _ = load_checkpoint(checkpoint_path)
    except (CheckpointError, OSError, ValueError) as exc:
        raise TransferError(f"cannot read checkpoint {checkpoint_path}: {exc}") from exc
    transfer_parameters(model, state)
    return train(model, train_ds, val_ds, cfg, metrics_path=metrics_path)
