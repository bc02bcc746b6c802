"""Optimizers, LR schedules, and the source-training regimes.

Three regimes share one loop: standard risk minimization, adversarial
training (each batch replaced by its PGD attack), and adversarial
training with a feature-distance penalty tying clean and adversarial
activations at a pinned split.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ops
from .attacks import AttackConfig, pgd
from .errors import DataError, GradError, ShapeError
from .layers import EVAL, ForwardCtx, Network
from .ops import cross_entropy_per_example, softmax_cross_entropy
from .rng import RngState
from .tensor import Tape, Tensor, reverse_grad

TRAIN_CSV_HEADER = ["epoch", "lr", "clean_loss", "adv_loss", "fdm_penalty", "clean_acc", "adv_acc"]


class SGD:
    """SGD with momentum 0.9; frozen parameters are skipped entirely."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 0.1, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.buffers: dict[str, np.ndarray] = {}

    def step(self):
        for name, p in self.params:
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise GradError(f"trainable parameter {name!r} has no gradient")
            v = self.buffers.get(name)
            v = p.grad if v is None else self.momentum * v + p.grad
            self.buffers[name] = v
            p.data = p.data - p.data.dtype.type(self.lr) * v

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


@dataclass
class Schedule:
    """Piecewise-constant decay: lr(e) = base_lr * decay^(#milestones <= e)."""

    base_lr: float = 0.1
    milestones: tuple = (40, 70, 90)
    decay: float = 0.2
    total_epochs: int = 100

    def lr_at_epoch(self, e: int) -> float:
        if not 0 <= e < self.total_epochs:
            raise ValueError(f"epoch {e} outside schedule range [0, {self.total_epochs})")
        hits = sum(1 for m in self.milestones if m <= e)
        return self.base_lr * self.decay**hits


def lr_at_epoch(schedule: Schedule, e: int) -> float:
    return schedule.lr_at_epoch(e)


@dataclass
class FDMConfig:
    """Feature-distance penalty: (lam/sqrt(d)) * sum_batch ||f(x) - f(x_adv)||_2."""

    lam: float
    k: int                      # split pinned at source-training time: features after block L-k
    mean_mode: bool = False     # batch-mean instead of the literal batch-sum

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"feature-distance penalty strength must be >= 0, got {self.lam}")


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 128
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0
    csv_path: Optional[str] = None

    def __post_init__(self):
        if self.schedule.total_epochs < self.epochs:
            self.schedule = Schedule(
                self.schedule.base_lr, self.schedule.milestones, self.schedule.decay, self.epochs
            )


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    clean_loss: float = math.nan
    adv_loss: float = math.nan
    fdm_penalty: float = math.nan
    clean_acc: float = math.nan
    adv_acc: float = math.nan
    feat_dist: float = math.nan

    def csv_row(self):
        def fmt(v):
            return "" if isinstance(v, float) and math.isnan(v) else repr(float(v))

        return [self.epoch, repr(float(self.lr))] + [
            fmt(v) for v in (self.clean_loss, self.adv_loss, self.fdm_penalty, self.clean_acc, self.adv_acc)
        ]


class MetricsWriter:
    def __init__(self, path: Optional[str]):
        self.path = path
        self._file = None
        if path:
            self._file = open(path, "w", newline="")
            self._csv = csv.writer(self._file)
            self._csv.writerow(TRAIN_CSV_HEADER)

    def write(self, row: EpochMetrics):
        if self._file:
            self._csv.writerow(row.csv_row())
            self._file.flush()

    def close(self):
        if self._file:
            self._file.close()
            self._file = None


def _check_labels(net: Network, labels: np.ndarray):
    classes = None
    if net.arch.get("classes"):
        classes = int(net.arch["classes"])
    else:
        classes = net.last_dense().out_dim
    if labels.min() < 0 or labels.max() >= classes:
        raise DataError(f"label out of range [0, {classes})")


def _batches(n: int, batch_size: int, rng: RngState):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def dataset_metrics(net: Network, images: np.ndarray, labels: np.ndarray, batch_size: int = 512):
    """Eval-mode loss/accuracy over a dataset (no gradients, no stat updates)."""
    losses, correct = 0.0, 0
    for lo in range(0, len(labels), batch_size):
        xb, yb = images[lo : lo + batch_size], labels[lo : lo + batch_size]
        logits = net.forward(Tensor(xb), EVAL).data
        losses += float(cross_entropy_per_example(logits, yb).sum())
        correct += int((logits.argmax(axis=1) == yb).sum())
    n = len(labels)
    return losses / n, correct / n


def fdm_loss(net: Network, x: np.ndarray, x_adv: np.ndarray, y: np.ndarray, fdm: FDMConfig):
    """Adversarial cross-entropy plus the scaled feature-distance penalty.

    Must be called inside an active Tape. Returns (loss, parts) where
    parts carries the plain float pieces for metrics. With lam == 0 the
    clean branch is skipped and the loss is exactly the adversarial
    cross-entropy.
    """
    if x.shape != x_adv.shape:
        raise ShapeError(f"clean/adversarial batch shapes differ: {x.shape} vs {x_adv.shape}")
    L = net.depth
    if not 1 <= fdm.k <= L:
        raise ShapeError(f"feature split k={fdm.k} invalid for a {L}-block network")
    tap = L - fdm.k
    train_ctx = ForwardCtx(training=True)
    logits_adv, feat_adv = net.forward_tapped(Tensor(x_adv), train_ctx, tap)
    ce = softmax_cross_entropy(logits_adv, y)
    parts = {
        "adv_ce": ce.item(),
        "adv_acc": float((logits_adv.data.argmax(axis=1) == y).mean()),
        "penalty": 0.0,
        "feat_dist": 0.0,
    }
    if fdm.lam == 0:
        return ce, parts
    # clean branch: batch statistics, but no running-stat or spectral updates
    clean_ctx = ForwardCtx(training=True, update_stats=False, update_spectral=False)
    feat_clean = net.forward_blocks(Tensor(x), clean_ctx, 0, tap)
    n = x.shape[0]
    diff = ops.sub(
        ops.reshape(feat_adv, (n, -1)),
        ops.reshape(feat_clean, (n, -1)),
    )
    d = int(np.prod(feat_adv.data.shape[1:]))
    norms = ops.rows_l2norm(diff)
    total = ops.sum_all(norms)
    coeff = fdm.lam / math.sqrt(d)
    if fdm.mean_mode:
        coeff /= n
    penalty = ops.scale(total, coeff)
    parts["penalty"] = penalty.item()
    parts["feat_dist"] = float(total.item()) / n
    return ops.add(ce, penalty), parts


def _feature_distance(net: Network, x: np.ndarray, x_adv: np.ndarray, tap: int) -> float:
    """Metric-only mean ||f(x) - f(x_adv)||_2 (no tape, batch-stat mode)."""
    ctx = ForwardCtx(training=True, update_stats=False, update_spectral=False)
    fa = net.forward_blocks(Tensor(x_adv), ctx, 0, tap).data
    fc = net.forward_blocks(Tensor(x), ctx, 0, tap).data
    n = x.shape[0]
    diff = (fa - fc).reshape(n, -1).astype(np.float64)
    return float(np.sqrt((diff * diff).sum(axis=1)).mean())


def _fit(net: Network, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
         batch_loss: Callable, clean_pass: bool) -> list[EpochMetrics]:
    """Shared epoch loop. `batch_loss(xb, yb)` runs inside a Tape and returns
    (loss Tensor, per-batch info dict)."""
    _check_labels(net, labels)
    opt = SGD(net.parameters())
    batch_rng = RngState(cfg.seed, "batches")
    writer = MetricsWriter(cfg.csv_path)
    history: list[EpochMetrics] = []
    try:
        for e in range(cfg.epochs):
            opt.lr = cfg.schedule.lr_at_epoch(e)
            sums: dict[str, float] = {}
            nb = 0
            for idx in _batches(len(labels), cfg.batch_size, batch_rng):
                xb, yb = images[idx], labels[idx]
                net.zero_grad()
                with Tape() as tape:
                    loss, info = batch_loss(xb, yb)
                reverse_grad(tape, loss)
                opt.step()
                nb += 1
                for key, v in info.items():
                    sums[key] = sums.get(key, 0.0) + v
            avg = {key: v / nb for key, v in sums.items()}
            row = EpochMetrics(epoch=e, lr=opt.lr)
            if clean_pass:
                row.clean_loss, row.clean_acc = dataset_metrics(net, images, labels)
                row.adv_loss = avg.get("adv_ce", math.nan)
                row.adv_acc = avg.get("adv_acc", math.nan)
            else:
                row.clean_loss = avg.get("ce", math.nan)
                row.clean_acc = avg.get("acc", math.nan)
            if "penalty" in avg:
                row.fdm_penalty = avg["penalty"]
            if "feat_dist" in avg:
                row.feat_dist = avg["feat_dist"]
            writer.write(row)
            history.append(row)
    finally:
        writer.close()
    return history


def train_standard(net: Network, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig):
    """Cross-entropy risk minimization over shuffled mini-batches."""

    def batch_loss(xb, yb):
        logits = net.forward(Tensor(xb), ForwardCtx(training=True))
        loss = softmax_cross_entropy(logits, yb)
        acc = float((logits.data.argmax(axis=1) == yb).mean())
        return loss, {"ce": loss.item(), "acc": acc}

    return _fit(net, images, labels, cfg, batch_loss, clean_pass=False)


def train_adversarial(net: Network, images: np.ndarray, labels: np.ndarray,
                      attack: AttackConfig, cfg: TrainConfig):
    """Saddle-point training: every batch is replaced by its PGD attack."""
    attack_rng = RngState(cfg.seed, "attack")

    def batch_loss(xb, yb):
        x_adv = pgd(net, xb, yb, attack, rng=attack_rng)
        logits = net.forward(Tensor(x_adv), ForwardCtx(training=True))
        loss = softmax_cross_entropy(logits, yb)
        acc = float((logits.data.argmax(axis=1) == yb).mean())
        return loss, {"adv_ce": loss.item(), "adv_acc": acc}

    return _fit(net, images, labels, cfg, batch_loss, clean_pass=True)


def train_source_cartl(net: Network, images: np.ndarray, labels: np.ndarray,
                       attack: AttackConfig, fdm: FDMConfig, cfg: TrainConfig):
    """Adversarial training with the feature-distance penalty at split k."""
    attack_rng = RngState(cfg.seed, "attack")
    tap = net.depth - fdm.k
    if tap < 0:
        raise ShapeError(f"split k={fdm.k} exceeds network depth {net.depth}")

    def batch_loss(xb, yb):
        x_adv = pgd(net, xb, yb, attack, rng=attack_rng)
        feat_dist = _feature_distance(net, xb, x_adv, tap)
        loss, parts = fdm_loss(net, xb, x_adv, yb, fdm)
        return loss, {
            "adv_ce": parts["adv_ce"],
            "adv_acc": parts["adv_acc"],
            "penalty": parts["penalty"],
            "feat_dist": feat_dist,
        }

    return _fit(net, images, labels, cfg, batch_loss, clean_pass=True)
