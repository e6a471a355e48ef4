"""Minibatch SGD with momentum, plus batched accuracy evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .model import Model, ModelSpec, init_params


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class TrainResult:
    model: Model
    # Running accuracy over the minibatches of each epoch, in percent.
    epoch_train_acc: list[float] = field(default_factory=list)


def train(spec: ModelSpec, images: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig, log: bool = False) -> TrainResult:
    """Train from a fresh seeded init. epochs=0 returns the init unchanged.

    Init and shuffling use separate streams derived from cfg.seed, so the
    result is reproducible regardless of how the data arrived.
    """
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    if images.shape[0] == 0 and cfg.epochs > 0:
        raise ValueError("cannot train on an empty dataset")
    model = Model(spec, init_params(spec, cfg.seed))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}

    result = TrainResult(model)
    n = images.shape[0]
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        hits = 0
        running_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = images[idx]
            yb = labels[idx]
            logits, cache = model.forward(xb, with_cache=True)
            loss, dlogits = ops.softmax_cross_entropy(logits, yb)
            _, grads = model.backward(cache, dlogits, need_param_grads=True)
            for k, g in grads.items():
                velocity[k] = cfg.momentum * velocity[k] - cfg.lr * g
                model.params[k] += velocity[k]
            hits += int((np.argmax(logits, axis=1) == yb).sum())
            running_loss += loss * len(idx)
        acc = 100.0 * hits / n
        result.epoch_train_acc.append(acc)
        if log:
            print(f"epoch {epoch + 1}/{cfg.epochs}: train acc {acc:.2f}% "
                  f"loss {running_loss / n:.4f}")
    return result


def evaluate(model, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    """Top-1 accuracy in percent. Works for float and quantized models alike."""
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    if images.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty batch")
    hits = 0
    for start in range(0, images.shape[0], batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        hits += int((np.argmax(model.logits(xb), axis=1) == yb).sum())
    return 100.0 * hits / images.shape[0]
