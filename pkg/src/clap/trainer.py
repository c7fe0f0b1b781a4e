"""Training loop, SGD with momentum, and evaluation.

All randomness is derived from ``(seed, epoch, ...)`` so an epoch's result
does not depend on how earlier epochs were scheduled. That makes a resumed
run identical to an uninterrupted one, and makes output independent of the
worker count.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import layers as L
from .checkpoint import TrainState, save_checkpoint
from .data import DatasetRecord, augment, fit_to_input
from .errors import DivergenceDetected, EmptyDataset, InvalidConfig, InvalidLabel, ShapeMismatch
from .metrics import EvalReport, evaluate_predictions
from .model import Model, forward, loss_and_grads

EVAL_CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 0.008
    batch_size: int = 32
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    lr_schedule: str = "constant"  # or "step"
    step_factor: float = 0.1
    step_every: int = 100
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    augment: bool = False
    workers: int = 1

    def __post_init__(self):
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise InvalidConfig(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer != "sgd_momentum":
            raise InvalidConfig(f"unsupported optimizer {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr_schedule not in ("constant", "step"):
            raise InvalidConfig(f"lr_schedule must be 'constant' or 'step', got {self.lr_schedule!r}")
        if self.lr_schedule == "step" and (self.step_every < 1 or self.step_factor <= 0):
            raise InvalidConfig("step schedule needs step_every >= 1 and step_factor > 0")
        if self.workers < 1:
            raise InvalidConfig(f"workers must be >= 1, got {self.workers}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        return self.learning_rate * self.step_factor ** ((epoch - 1) // self.step_every)

    def to_dict(self) -> dict:
        return asdict(self)


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, velocity: dict) -> None:
    """In place: ``v = momentum * v - lr * g``; ``p = p + v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v -= lr * g
        p += v


# ---------------------------------------------------------------------------
# batching and evaluation


def _stack(model: Model, images: Sequence[np.ndarray]) -> np.ndarray:
    size = model.config.input_size[:2]
    return np.stack([fit_to_input(img, size) for img in images]).astype(model.dtype, copy=False)


def _labels(records: Sequence[DatasetRecord], k: int) -> np.ndarray:
    labels = np.array([r.label for r in records], dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidLabel(f"dataset label outside [0, {k})")
    return labels


def predict(model: Model, records: Sequence[DatasetRecord], workers: int = 1) -> np.ndarray:
    """Inference-mode class probabilities, computed in fixed-size chunks so the
    result is identical for any worker count."""
    if not records:
        raise EmptyDataset("no records to evaluate")
    chunks = [records[i:i + EVAL_CHUNK] for i in range(0, len(records), EVAL_CHUNK)]

    def run(chunk):
        return forward(model, _stack(model, [r.image for r in chunk]), L.INFER)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    return np.concatenate(outs)


def evaluate(model: Model, records: Sequence[DatasetRecord], workers: int = 1) -> EvalReport:
    probs = predict(model, records, workers)
    k = model.config.num_classes
    return evaluate_predictions(_labels(records, k), probs.argmax(axis=1), k)


def evaluate_with_loss(model: Model, records, workers: int = 1):
    probs = predict(model, records, workers)
    labels = _labels(records, model.config.num_classes)
    picked = probs[np.arange(len(labels)), labels].astype(np.float64)
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))
    acc = float(np.mean(probs.argmax(axis=1) == labels))
    return loss, acc


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    state: TrainState  # final weights and optimizer state
    best: Optional[TrainState]  # weights at the best validation accuracy
    history: list


def history_line(record: dict) -> str:
    return json.dumps(record, separators=(",", ":")) + "\n"


def _epoch_images(records, order, cfg: TrainConfig, epoch: int, model: Model, pool):
    if not cfg.augment:
        return [records[i].image for i in order]
    crop = model.config.input_size[0]
    canvas = round(crop * 256 / 224)

    def aug(i):
        rng = np.random.default_rng([cfg.seed, epoch, 2, int(i)])
        return augment(records[i], rng, canvas=canvas, crop=crop).image

    if pool is not None:
        return list(pool.map(aug, order))
    return [aug(i) for i in order]


def train(model: Model, train_set: Sequence[DatasetRecord], val_set: Sequence[DatasetRecord],
          cfg: TrainConfig, sink: Optional[Callable[[dict], None]] = None,
          state: Optional[TrainState] = None, checkpoint_dir=None) -> TrainResult:
    """Train until ``cfg.epochs`` (1-based, inclusive) have completed.

    Passing ``state`` resumes after ``state.epoch``. ``sink`` receives one
    record per epoch: epoch, lr, train_loss, train_acc, val_loss, val_acc.
    Train loss/accuracy are running averages over the epoch's train-mode
    batches. With ``checkpoint_dir`` set, ``best.ckpt`` tracks the best
    validation accuracy and ``last.ckpt`` is written every
    ``cfg.checkpoint_every`` epochs.
    """
    if not train_set:
        raise EmptyDataset("training set is empty")
    k = model.config.num_classes
    labels = _labels(train_set, k)
    _labels(val_set, k)
    if state is None:
        state = TrainState(model)
    elif state.model is not model:
        raise ValueError("state.model must be the model being trained")
    params = dict(model.named_parameters())
    history = []
    best = None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(state.epoch + 1, cfg.epochs + 1):
            last_good = state.copy()
            lr = cfg.lr_at(epoch)
            order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(train_set))
            images = _epoch_images(train_set, order, cfg, epoch, model, pool)
            loss_sum, correct = 0.0, 0
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                x = _stack(model, images[start:start + cfg.batch_size])
                y = labels[idx]
                rng = np.random.default_rng([cfg.seed, epoch, 3, b])
                loss, grads, probs = loss_and_grads(model, x, y, L.TRAIN, rng)
                if not math.isfinite(loss):
                    raise DivergenceDetected(f"non-finite loss at epoch {epoch}, batch {b}", last_good)
                sgd_step(params, grads, lr, cfg.momentum, state.velocity)
                loss_sum += loss * len(idx)
                correct += int(np.sum(probs.argmax(axis=1) == y))
            record = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / len(order),
                      "train_acc": correct / len(order)}
            if val_set:
                record["val_loss"], record["val_acc"] = evaluate_with_loss(model, val_set, cfg.workers)
            else:
                record["val_loss"], record["val_acc"] = None, None
            state.epoch = epoch
            if val_set and record["val_acc"] > state.best_val_acc:
                state.best_val_acc, state.best_epoch = record["val_acc"], epoch
                best = state.copy()
                if ckpt_dir is not None:
                    save_checkpoint(best, ckpt_dir / "best.ckpt")
            if ckpt_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(state, ckpt_dir / "last.ckpt")
            history.append(record)
            if sink is not None:
                sink(record)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(state, best, history)
