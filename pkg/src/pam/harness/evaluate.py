"""Pair verification with cross-validated cosine thresholds."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..tensor import Tensor, no_grad
from .data import SynthDataset, SynthSample

YAW_BUCKETS = ((0.0, 30.0), (30.0, 60.0), (60.0, 90.0))
BUCKET_NAMES = ("acc_y0_30", "acc_y30_60", "acc_y60_90")


@dataclass
class VerificationResult:
    accuracy: float
    bucket_accuracy: dict = field(default_factory=dict)
    bucket_counts: dict = field(default_factory=dict)
    thresholds: list = field(default_factory=list)


def embed(model, images: np.ndarray, yaws: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Unit-norm eval-mode embeddings, computed without recording a graph."""
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(np.asarray(images[start:start + batch_size], dtype=model.dtype))
            out.append(model(x, yaws[start:start + batch_size]).data.astype(np.float64))
    e = np.concatenate(out, axis=0)
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def best_threshold(sims: np.ndarray, same: np.ndarray) -> float:
    """Threshold maximizing accuracy of ``sims > t``; the smallest such on ties."""
    u = np.unique(sims)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    acc = ((sims[None, :] > cands[:, None]) == same[None, :]).mean(axis=1)
    return float(cands[int(np.argmax(acc))])


def bucket_of(abs_yaw: np.ndarray) -> np.ndarray:
    """Bucket index per |yaw|: [0,30) -> 0, [30,60) -> 1, [60,90] -> 2."""
    return np.minimum((np.asarray(abs_yaw) // 30).astype(int), 2)


def verify(sims: np.ndarray, same: np.ndarray, pair_yaw: np.ndarray,
           n_folds: int = 10) -> VerificationResult:
    """Score pairs with thresholds chosen on the other folds.

    ``pair_yaw`` is the larger |yaw| of the two images in each pair and
    decides the pair's bucket.
    """
    sims = np.asarray(sims, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if sims.size == 0:
        raise ValueError("verification needs at least one pair")
    n_folds = max(1, min(n_folds, sims.size))
    folds = np.array_split(np.arange(sims.size), n_folds)
    correct = np.zeros(sims.size, dtype=bool)
    thresholds = []
    for k, test in enumerate(folds):
        train = np.concatenate([f for i, f in enumerate(folds) if i != k]) if n_folds > 1 else test
        t = best_threshold(sims[train], same[train])
        thresholds.append(t)
        correct[test] = (sims[test] > t) == same[test]
    buckets = bucket_of(pair_yaw)
    acc_b, count_b = {}, {}
    for b, name in enumerate(BUCKET_NAMES):
        mask = buckets == b
        count_b[name] = int(mask.sum())
        acc_b[name] = float(correct[mask].mean()) if mask.any() else float("nan")
    return VerificationResult(float(correct.mean()), acc_b, count_b, thresholds)


def make_pairs(ds: SynthDataset, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One same-identity and one different-identity partner per sample.

    Returns index arrays ``(a, b)`` and the boolean ``same`` flags.
    """
    rng = np.random.default_rng(seed)
    labels = ds.labels
    a, b, same = [], [], []
    by_id = {k: np.flatnonzero(labels == k) for k in np.unique(labels)}
    for i in range(len(ds)):
        mates = by_id[labels[i]]
        mates = mates[mates != i]
        if len(mates):
            a.append(i)
            b.append(int(rng.choice(mates)))
            same.append(True)
        others = np.flatnonzero(labels != labels[i])
        if len(others):
            a.append(i)
            b.append(int(rng.choice(others)))
            same.append(False)
    return np.array(a, dtype=int), np.array(b, dtype=int), np.array(same, dtype=bool)


def evaluate_pairs(model, ds: SynthDataset, pairs) -> VerificationResult:
    a, b, same = pairs
    if len(a) == 0:
        raise ValueError("verification needs at least one pair")
    e = embed(model, ds.images, ds.yaws)
    sims = (e[a] * e[b]).sum(axis=1)
    pair_yaw = np.maximum(np.abs(ds.yaws[a]), np.abs(ds.yaws[b]))
    return verify(sims, same, pair_yaw)


def evaluate_verification(model, pairs: Sequence[tuple[SynthSample, SynthSample, bool]]) -> VerificationResult:
    """Accuracy over explicit ``(sample, sample, same_identity)`` pairs."""
    if len(pairs) == 0:
        raise ValueError("verification needs at least one pair")
    imgs = np.stack([s.image for p in pairs for s in p[:2]])
    yaws = np.array([s.yaw_deg for p in pairs for s in p[:2]])
    e = embed(model, imgs, yaws)
    sims = (e[0::2] * e[1::2]).sum(axis=1)
    same = np.array([bool(p[2]) for p in pairs])
    pair_yaw = np.maximum(np.abs(yaws[0::2]), np.abs(yaws[1::2]))
    return verify(sims, same, pair_yaw)
