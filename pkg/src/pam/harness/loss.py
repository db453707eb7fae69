"""Additive angular margin softmax loss."""

from __future__ import annotations

import math

import numpy as np

from .. import tensor as T
from ..tensor import Tensor

NORM_TOLERANCE = 1e-6


class MarginStats:
    """Counts target angles whose ``theta + m`` had to be clamped at pi."""

    def __init__(self):
        self.clamped = 0

    def reset(self) -> None:
        self.clamped = 0


stats = MarginStats()


def _check_unit_rows(x: Tensor, what: str) -> None:
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=1))
    bad = np.abs(norms - 1.0) > NORM_TOLERANCE
    if bad.any():
        raise ValueError(f"margin_loss: {what} rows {np.flatnonzero(bad).tolist()} are not unit-norm")


def arc_margin_logits(cos: Tensor, labels: np.ndarray, s: float, m: float) -> Tensor:
    """Scale cosines by ``s``, replacing each target entry cos(theta) with cos(theta + m)."""
    n = cos.shape[0]
    rows = np.arange(n)
    c = np.clip(cos.data[rows, labels].astype(np.float64), -1.0, 1.0)
    sin = np.sqrt(np.maximum(0.0, 1.0 - c * c))
    cos_m, sin_m = math.cos(m), math.sin(m)
    clamped = c <= -cos_m  # theta >= pi - m
    stats.clamped += int(clamped.sum())
    target = np.where(clamped, -1.0, c * cos_m - sin * sin_m)
    # d cos(theta + m) / d cos(theta) = sin(theta + m) / sin(theta)
    slope = np.where(clamped, 0.0, cos_m + c * sin_m / np.maximum(sin, 1e-12))

    out = cos.data * s
    out[rows, labels] = s * target

    def backward(g):
        gc = g * s
        gc[rows, labels] = g[rows, labels] * s * slope
        return (gc,)

    return Tensor.from_op(out.astype(cos.dtype, copy=False), (cos,), backward)


def margin_loss(embeddings: Tensor, labels, class_weights: Tensor, s: float = 64.0,
                m: float = 0.5) -> Tensor:
    """Mean cross-entropy over logits ``s*cos(theta_j)``, target logit ``s*cos(theta_y + m)``.

    Both ``embeddings`` (n, d) and ``class_weights`` (k, d) must already be
    L2-normalized row-wise.
    """
    if s <= 0 or not 0 <= m < math.pi / 2:
        raise ValueError(f"margin_loss: need s > 0 and 0 <= m < pi/2, got s={s}, m={m}")
    labels = np.asarray(labels, dtype=np.int64)
    _check_unit_rows(embeddings, "embedding")
    _check_unit_rows(class_weights, "class weight")
    cos = T.affine(embeddings, class_weights)
    if labels.shape != (cos.shape[0],) or labels.min(initial=0) < 0 or labels.max(initial=0) >= cos.shape[1]:
        raise ValueError(f"margin_loss: labels must be {cos.shape[0]} indices below {cos.shape[1]}")
    return T.cross_entropy(arc_margin_logits(cos, labels, s, m), labels)
