"""Mini-batch training with per-epoch validation and best-checkpoint retention."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import network
from .augmentation import AugmentationPolicy
from .dataset import ManifestEntry, batches
from .network import Model
from .tensor_core import bce_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    run_seed: int = 0
    augmentation: AugmentationPolicy | None = field(default_factory=AugmentationPolicy)
    input_size: int = 224
    normalization: str = "unit"
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class HistoryStats:
    min: float
    mean: float
    max: float
    std: float


class SGD:
    def __init__(self, params, lr):
        self.params = [p for p in params if p.trainable]
        self.lr = lr

    def step(self):
        for p in self.params:
            p.value -= np.float32(self.lr) * p.grad


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = self.lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            m *= np.float32(b1)
            m += np.float32(1 - b1) * p.grad
            v *= np.float32(b2)
            v += np.float32(1 - b2) * p.grad * p.grad
            p.value -= np.float32(step) * m / (np.sqrt(v) + np.float32(self.eps))


def make_optimizer(model: Model, config: TrainConfig):
    params = [p for _, p in model.named_parameters()]
    if config.optimizer == "sgd":
        return SGD(params, config.learning_rate)
    return Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)


def predict_entries(model: Model, entries: Sequence[ManifestEntry], config: TrainConfig) -> np.ndarray:
    probs = []
    for batch in batches(entries, config.batch_size, shuffle=False, size=config.input_size,
                         normalization=config.normalization):
        probs.append(model.forward(batch.inputs))
    return np.concatenate(probs)


def accuracy(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    return float(np.mean((probs >= threshold).astype(int) == labels))


def train_step(model: Model, optimizer, inputs: np.ndarray, labels: np.ndarray, rng=None):
    """One optimizer step on one batch; returns (per-sample losses, probabilities)."""
    model.zero_grad()
    trace = model.forward_trace(inputs, train=True, rng=rng)
    losses, dp = bce_loss(trace.probs, labels)
    model.backward(trace, dp / len(labels), wrt="prob")
    optimizer.step()
    return losses, trace.probs


def fit(model: Model, train: Sequence[ManifestEntry], val: Sequence[ManifestEntry],
        config: TrainConfig) -> tuple[Model, list[EpochRecord]]:
    """Train ``model`` in place; return a copy holding the best-validation weights and the history.

    Ties on validation accuracy keep the earliest epoch.
    """
    if not train or not val:
        raise ValueError("fit needs non-empty train and val entries")
    if config.epochs == 0:
        return network.clone(model), []
    optimizer = make_optimizer(model, config)
    history: list[EpochRecord] = []
    best_acc, best = -1.0, None
    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([config.run_seed, epoch, 1]))
        total_loss, correct, seen = 0.0, 0, 0
        for b, batch in enumerate(batches(train, config.batch_size, epoch, config.run_seed,
                                          config.augmentation, config.input_size,
                                          normalization=config.normalization)):
            losses, probs = train_step(model, optimizer, batch.inputs, batch.labels, rng)
            if not np.all(np.isfinite(losses)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            total_loss += float(losses.sum())
            correct += int(((probs >= config.threshold).astype(int) == batch.labels).sum())
            seen += len(batch.labels)
        val_probs = predict_entries(model, val, config)
        val_acc = accuracy(val_probs, np.array([e.target for e in val]), config.threshold)
        rec = EpochRecord(epoch, total_loss / seen, correct / seen, val_acc)
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.4f val_acc %.4f", epoch, rec.train_loss, rec.train_acc, val_acc)
        if val_acc > best_acc:
            best_acc, best = val_acc, network.snapshot(model)
    checkpoint = network.clone(model)
    network.restore(checkpoint, best)
    return checkpoint, history


def history_stats(history: Sequence[EpochRecord]) -> HistoryStats:
    """Validation-accuracy summary with the population (divide-by-N) standard deviation."""
    if not history:
        raise ValueError("history is empty")
    acc = np.array([r.val_acc for r in history], dtype=np.float64)
    mean = float(acc.mean())
    return HistoryStats(float(acc.min()), mean, float(acc.max()), float(np.sqrt(((acc - mean) ** 2).mean())))


def history_csv(history: Sequence[EpochRecord]) -> str:
    lines = ["epoch,train_loss,train_acc,val_acc"]
    for r in history:
        lines.append(f"{r.epoch},{r.train_loss:.9f},{r.train_acc:.9f},{r.val_acc:.9f}")
    return "\n".join(lines) + "\n"


def parse_history_csv(text: str) -> list[EpochRecord]:
    rows = text.strip().splitlines()[1:]
    out = []
    for row in rows:
        e, loss, tr, va = row.split(",")
        out.append(EpochRecord(int(e), float(loss), float(tr), float(va)))
    return out


def history_svg(history: Sequence[EpochRecord], width: int = 640, height: int = 400) -> str:
    """Line chart of train and validation accuracy per epoch."""
    left, right, top, bottom = 60, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom
    n = max(len(history) - 1, 1)

    def pt(i, acc):
        return f"{left + pw * i / n:.2f},{top + ph * (1 - acc):.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle" font-size="14">epoch</text>',
        f'<text x="15" y="{top + ph / 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 15 {top + ph / 2})">accuracy</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = top + ph * (1 - tick)
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end" font-size="11">{tick:.2f}</text>')
    for i in sorted({0, len(history) - 1} - {-1}):
        parts.append(f'<text x="{left + pw * i / n:.2f}" y="{top + ph + 16}" text-anchor="middle" '
                     f'font-size="11">{i}</text>')
    for k, (key, color, label) in enumerate((("train_acc", "#1f77b4", "train"), ("val_acc", "#ff7f0e", "validation"))):
        if history:
            pts = " ".join(pt(i, getattr(r, key)) for i, r in enumerate(history))
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{left + 10 + 50 * k}" y="{top - 10}" font-size="12" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["augmentation"] = config.augmentation.to_dict() if config.augmentation else None
    return d
