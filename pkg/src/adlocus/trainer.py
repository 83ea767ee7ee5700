"""Deterministic mini-batch training with SGD or Adam."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest, load_arrays
from .errors import ConfigError, TrainingError
from .layers import bce_loss
from .model import ModelParams, forward, loss_and_grads, save_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float | None] = field(default_factory=list)
    seconds: float = 0.0
    checkpoint: Path | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), 1):
                w.writerow([epoch, f"{tr:.8f}", "" if va is None else f"{va:.8f}"])


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        return [p - self.lr * g for p, g in zip(params, grads)]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate)
    return Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)


def _as_arrays(dataset, size):
    if isinstance(dataset, DatasetManifest):
        if not len(dataset):
            raise ConfigError("dataset is empty")
        images, masks, _ = load_arrays(dataset, size)
        return images, masks
    images, masks = dataset
    if len(images) == 0:
        raise ConfigError("dataset is empty")
    return np.asarray(images, np.float64), np.asarray(masks, np.float64)


def evaluate_loss(params: ModelParams, dataset, batch_size: int = 8) -> float:
    """Mean per-sample BCE over a manifest or an ``(images, masks)`` pair."""
    images, masks = _as_arrays(dataset, params.config.input_size)
    losses = []
    for start in range(0, len(images), batch_size):
        probs = forward(params, images[start:start + batch_size])
        for p, m in zip(probs, masks[start:start + batch_size]):
            losses.append(bce_loss(p, m)[0])
    return float(np.mean(losses))


def train(
    params: ModelParams,
    dataset,
    config: TrainConfig,
    val_dataset=None,
    checkpoint_dir=None,
) -> tuple[ModelParams, TrainReport]:
    """Train ``params`` on a manifest (or preloaded ``(images, masks)`` arrays).

    Each epoch visits the samples in an order drawn from a generator seeded
    with ``config.seed``; a batch step uses the gradient of the mean loss over
    its pixels, so it is the mean of per-sample gradients.
    """
    config.validate()
    size = params.config.input_size
    images, masks = _as_arrays(dataset, size)
    val = _as_arrays(val_dataset, size) if val_dataset is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config)
    report = TrainReport()
    started = time.perf_counter()
    arrays = params.arrays()
    n = len(images)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        batch_losses, batch_sizes = [], []
        for b, start in enumerate(range(0, n, config.batch_size), 1):
            idx = np.sort(order[start:start + config.batch_size])
            loss, grads = loss_and_grads(params, images[idx], masks[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            arrays = opt.step(arrays, grads)
            params = params.with_arrays(arrays)
            batch_losses.append(loss)
            batch_sizes.append(len(idx))
        report.train_loss.append(float(np.average(batch_losses, weights=batch_sizes)))
        report.val_loss.append(evaluate_loss(params, val) if val is not None else None)
        log.info("epoch %d train_loss %.6f val_loss %s", epoch, report.train_loss[-1], report.val_loss[-1])
        if checkpoint_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            report.checkpoint = checkpoint_dir / f"ckpt_epoch{epoch}.adlw"
            save_weights(params, report.checkpoint)
    if checkpoint_dir is not None:
        final = checkpoint_dir / f"ckpt_epoch{config.epochs}.adlw"
        if report.checkpoint != final:
            save_weights(params, final)
        report.checkpoint = final
    report.seconds = time.perf_counter() - started
    return params, report
