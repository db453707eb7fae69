"""Momentum-SGD training with the angular margin loss."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import tensor as T
from ..backbone import Model, save_checkpoint
from ..tensor import Tensor, no_grad
from .data import SynthDataset
from .evaluate import BUCKET_NAMES, evaluate_pairs
from .loss import margin_loss

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "loss", "acc") + BUCKET_NAMES


@dataclass(frozen=True)
class TrainConfig:
    scale: float = 64.0
    margin: float = 0.5
    lr: float = 0.1
    lr_decay_epochs: tuple = (5, 9, 11)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 12
    seed: int = 0
    flip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        errors = []
        if not self.scale > 0:
            errors.append("scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            errors.append("margin must lie in [0, pi/2)")
        if self.lr < 0:
            errors.append("lr must be nonnegative")
        if not 0 <= self.momentum < 1:
            errors.append("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            errors.append("weight_decay must be nonnegative")
        if self.batch_size < 2:
            errors.append("batch_size must be at least 2")
        if self.epochs < 0:
            errors.append("epochs must be nonnegative")
        if errors:
            raise ValueError("TrainConfig: " + "; ".join(errors))

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``."""
        drops = sum(1 for e in self.lr_decay_epochs if epoch > e)
        return self.lr * self.lr_factor ** drops


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: Model
    class_weights: Tensor
    history: list = field(default_factory=list)


class SGD:
    """Heavy-ball momentum with L2 weight decay folded into the gradient."""

    def __init__(self, params, momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


def _snapshot_buffers(model: Model) -> list:
    return [b.copy() for _, b in model.named_buffers()]


def _restore_buffers(model: Model, saved: list) -> None:
    for (_, b), s in zip(model.named_buffers(), saved):
        b[...] = s


def _batch_loss(model, weights, images, yaws, labels, cfg) -> Tensor:
    e = T.l2_normalize(model(Tensor(images), yaws))
    w = T.l2_normalize(weights)
    return margin_loss(e, labels, w, cfg.scale, cfg.margin)


def dataset_loss(model: Model, weights: Tensor, ds: SynthDataset, cfg: TrainConfig) -> float:
    """Mean loss over fixed, unaugmented batches using batch statistics.

    Depends on the parameters only: running statistics are restored afterwards.
    """
    saved = _snapshot_buffers(model)
    model.train()
    n = len(ds)
    total = 0.0
    with no_grad():
        for idx in np.array_split(np.arange(n), max(1, n // cfg.batch_size)):
            imgs = ds.images[idx].astype(model.dtype)
            loss = _batch_loss(model, weights, imgs, ds.yaws[idx], ds.labels[idx], cfg)
            total += float(loss.data) * len(idx)
    _restore_buffers(model, saved)
    return total / n


def init_class_weights(n_classes: int, dim: int, seed: int, dtype) -> Tensor:
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    return Tensor(rng.normal(size=(n_classes, dim)).astype(dtype), requires_grad=True)


def write_history_csv(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[k]:.12g}" for k in CSV_HEADER[1:]])


def train(model: Model, dataset: SynthDataset, cfg: TrainConfig,
          eval_set: Optional[SynthDataset] = None, pairs=None,
          out_dir=None) -> TrainResult:
    """Train ``model`` in place.

    Row 0 of the history is the state before any update. When ``out_dir``
    is given the final checkpoint and ``metrics.csv`` are written there.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
    n_classes = int(dataset.labels.max()) + 1
    weights = init_class_weights(n_classes, model.cfg.embedding_dim, cfg.seed, model.dtype)
    opt = SGD(model.parameters() + [weights], cfg.momentum, cfg.weight_decay)
    history = []

    def record(epoch: int) -> dict:
        row = {"epoch": epoch, "loss": dataset_loss(model, weights, dataset, cfg)}
        if eval_set is not None and pairs is not None:
            res = evaluate_pairs(model, eval_set, pairs)
            row["acc"] = res.accuracy
            row.update(res.bucket_accuracy)
        else:
            row["acc"] = float("nan")
            row.update({k: float("nan") for k in BUCKET_NAMES})
        history.append(row)
        log.info("epoch %d loss %.6f acc %.4f", epoch, row["loss"], row["acc"])
        return row

    record(0)
    n = len(dataset)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if cfg.flip else np.zeros(n, dtype=bool)
        model.train()
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            imgs = dataset.images[idx].astype(model.dtype)
            yaws = dataset.yaws[idx].copy()
            f = flips[idx]
            imgs[f] = imgs[f][..., ::-1]
            yaws[f] = -yaws[f]
            model.zero_grad()
            weights.grad = None
            loss = _batch_loss(model, weights, imgs, yaws, dataset.labels[idx], cfg)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            opt.step(lr)
        row = record(epoch)
        if not np.isfinite(row["loss"]):
            raise TrainingDiverged(f"non-finite loss after epoch {epoch}")

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "checkpoint.npz", extra={"final": history[-1]})
        write_history_csv(history, out / "metrics.csv")
    return TrainResult(model, weights, history)
