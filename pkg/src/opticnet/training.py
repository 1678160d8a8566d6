"""Adam, plateau learning-rate decay, the training loop and evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from opticnet import ops
from opticnet.checkpoint import save_checkpoint
from opticnet.data import Dataset, DatasetError, kfold_split  # noqa: F401  (re-exported)
from opticnet.metrics import ConfusionMatrix
from opticnet.tensor import ContractError, Tensor, Variable, backward, no_grad, zero_grad

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    lr: float = 1e-4
    gamma: float = 0.1
    patience: int = 6
    lr_min: float = 1e-8
    beta1: float = 0.90
    beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    max_steps: int | None = None
    stop_at_train_acc: float | None = None

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ContractError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.lr_min > self.lr and self.lr > 0:
            raise ContractError("lr_min must not exceed lr")
        if self.patience < 1 or self.batch_size < 1:
            raise ContractError("patience and batch_size must be >= 1")


@dataclass
class OptimizerState:
    beta1: float = 0.90
    beta2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(variables: list[Variable], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update of every trainable variable."""
    params = [v for v in variables if getattr(v, "trainable", True)]
    if all(v.grad is None or not v.grad.any() for v in params):
        warnings.warn("adam_step called with all-zero gradients (backward not run?)", stacklevel=2)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for v in params:
        g = v.grad if v.grad is not None else np.zeros_like(v.data)
        key = id(v)
        if key not in state.m:
            state.m[key] = np.zeros_like(v.data)
            state.v[key] = np.zeros_like(v.data)
        m, s = state.m[key], state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        s *= b2
        s += (1.0 - b2) * (g * g)
        v.data -= (lr * (m / c1) / (np.sqrt(s / c2) + state.eps)).astype(v.dtype, copy=False)


@dataclass
class LRScheduleState:
    lr: float = 1e-4
    gamma: float = 0.1
    patience: int = 6
    lr_min: float = 1e-8
    best: float = math.inf
    wait: int = 0


def scheduler_step(state: LRScheduleState, val_loss: float) -> float:
    """Decay lr by gamma after ``patience`` epochs without strict improvement."""
    if val_loss < state.best:
        state.best = val_loss
        state.wait = 0
    else:
        state.wait += 1
        if state.wait >= state.patience:
            state.lr = max(state.lr * state.gamma, state.lr_min)
            state.wait = 0
    return state.lr


def batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def predict_logits(model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(model(Tensor(images[i:i + batch_size].astype(model.dtype))).data)
    model.train(was_training)
    return np.concatenate(outs)


def evaluate_loss(model, ds: Dataset, batch_size: int = 32) -> tuple[float, float]:
    logits = predict_logits(model, ds.images, batch_size)
    loss = ops.softmax_cross_entropy(Tensor(logits.astype(np.float64)), ds.labels).item()
    return loss, float((logits.argmax(axis=1) == ds.labels).mean())


def evaluate(model, ds: Dataset, batch_size: int = 32) -> ConfusionMatrix:
    if model.cfg.classes != ds.num_classes:
        raise ContractError(f"model predicts {model.cfg.classes} classes, dataset has {ds.num_classes}")
    preds = predict_logits(model, ds.images, batch_size).argmax(axis=1)
    return ConfusionMatrix.from_predictions(ds.labels, preds, ds.num_classes, ds.class_names)


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    steps: int = 0
    best_val_loss: float = math.inf
    checkpoint: Path | None = None
    log_path: Path | None = None
    seconds: float = 0.0

    @property
    def best_train_acc(self) -> float:
        return max((r["train_acc"] for r in self.rows), default=float("nan"))


def _fmt(v):
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def train(model, train_ds: Dataset, cfg: TrainConfig, val_ds: Dataset | None = None,
          run_dir=None) -> TrainResult:
    """Mini-batch Adam with plateau decay.

    The schedule and best-checkpoint choice use validation loss when a
    validation set is given, otherwise the epoch's training loss.
    """
    train_ds.check_nonempty_classes()
    if train_ds.num_classes < 2:
        raise DatasetError("training needs at least two classes")
    if model.cfg.classes != train_ds.num_classes:
        raise ContractError(f"model predicts {model.cfg.classes} classes, dataset has {train_ds.num_classes}")
    result = TrainResult()
    run_dir = Path(run_dir) if run_dir is not None else None
    writer = fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        result.log_path = run_dir / "log.csv"
        fh = result.log_path.open("w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        fh.flush()

    sched = LRScheduleState(cfg.lr, cfg.gamma, cfg.patience, cfg.lr_min)
    opt = OptimizerState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    params = model.variables()
    start = time.perf_counter()
    model.train()
    try:
        for epoch in range(cfg.epochs):
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
            loss_sum, correct, seen = 0.0, 0, 0
            for idx in batches(len(train_ds), cfg.batch_size, cfg.seed, epoch):
                if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                    break
                x = Tensor(train_ds.images[idx].astype(model.dtype))
                y = train_ds.labels[idx]
                zero_grad(params)
                logits = model(x)
                loss = ops.softmax_cross_entropy(logits, y)
                backward(loss)
                adam_step(params, opt, sched.lr)
                result.steps += 1
                loss_sum += loss.item() * len(idx)
                correct += int((logits.data.argmax(axis=1) == y).sum())
                seen += len(idx)
            train_loss, train_acc = loss_sum / seen, correct / seen
            if val_ds is not None and len(val_ds):
                val_loss, val_acc = evaluate_loss(model, val_ds, cfg.batch_size)
                monitored = val_loss
            else:
                val_loss = val_acc = float("nan")
                monitored = train_loss
            row = {"epoch": epoch, "lr": sched.lr, "train_loss": train_loss, "train_acc": train_acc,
                   "val_loss": val_loss, "val_acc": val_acc}
            result.rows.append(row)
            log.info("epoch %d step %d lr %.3g loss %.4f acc %.3f val_loss %.4f val_acc %.3f",
                     epoch, result.steps, sched.lr, train_loss, train_acc, val_loss, val_acc)
            if writer is not None:
                writer.writerow({k: _fmt(v) for k, v in row.items()})
                fh.flush()
            if monitored < result.best_val_loss:
                result.best_val_loss = monitored
                if run_dir is not None:
                    result.checkpoint = run_dir / "best.optn"
                    save_checkpoint(model, result.checkpoint)
            scheduler_step(sched, monitored)
            if cfg.stop_at_train_acc is not None and train_acc >= cfg.stop_at_train_acc:
                break
    finally:
        if fh is not None:
            fh.close()
    result.seconds = time.perf_counter() - start
    return result
