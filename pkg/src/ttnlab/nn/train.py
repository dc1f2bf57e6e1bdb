from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..norm import NormMode
from .losses import cross_entropy
from .model import Model, backward, forward
from .optim import AdamState, adam_step, cosine_lr

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Loss or parameters went non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-2
    optimizer: str = "adam"
    schedule: str = "cosine"
    seed: int = 0
    momentum: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        if not 0 < self.momentum <= 1:
            raise ValueError("running-stat momentum must lie in (0, 1]")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unsupported schedule {self.schedule!r}")


def predict(model: Model, images: np.ndarray, mode: NormMode | None = None, batch_size: int = 500) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(model, images[start:start + batch_size], mode or NormMode.cbn())
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def error_rate(model: Model, data, mode: NormMode | None = None) -> float:
    return float(np.mean(predict(model, data.images, mode) != data.labels))


def pretrain(model: Model, train, cfg: TrainConfig, history: list | None = None) -> Model:
    """Supervised source training with batch statistics and EMA running stats.

    Returns a trained copy; ``history`` (if given) receives one dict per epoch.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    model = model.copy()
    for layer in model.norm_layers:
        layer.momentum = cfg.momentum
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    state = AdamState()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        losses, wrong = [], 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, cache = forward(model, train.images[idx], NormMode.train())
            loss, grad = cross_entropy(logits, train.labels[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"pretrain diverged at epoch {epoch}, step {step}: loss={loss}")
            grads = backward(model, cache, grad, "all")
            lr = cosine_lr(cfg.lr, step, total) if cfg.schedule == "cosine" else cfg.lr
            params, state = adam_step(model.named_params(), grads, state, lr)
            model.set_params(params)
            losses.append(loss * len(idx))
            wrong += int((logits.argmax(axis=1) != train.labels[idx]).sum())
            step += 1
        row = {"epoch": epoch, "loss": sum(losses) / len(train), "lr": lr, "train_error": wrong / len(train)}
        log.info("pretrain epoch %d loss %.4f train error %.4f", epoch, row["loss"], row["train_error"])
        if history is not None:
            history.append(row)
    return model
