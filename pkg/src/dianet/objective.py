"""Cross-entropy, cross-phase consistency, the combined loss, and accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .ndcore import Tensor, cosine_similarity, log_softmax_lastdim, mean_over_axis, mul, scale, sum_

DEFAULT_LAMBDA = 0.1
LAMBDA_SWEEP = (0.0, 0.01, 0.1, 0.5, 1.0)


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    cons: float
    lam: float
    total: float


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise ShapeError(f"logits {logits.shape} incompatible with {len(labels)} labels")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside [0, {k})")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    picked = sum_(mul(log_softmax_lastdim(logits), Tensor(onehot)), axis=-1)
    return scale(mean_over_axis(picked), -1.0)


def consistency_loss(f1, f2):
    """Mean over the batch of 1 - cos(f1_i, f2_i); lies in [0, 2]."""
    if f1.shape != f2.shape:
        raise ShapeError(f"feature batches differ: {f1.shape} vs {f2.shape}")
    cos = cosine_similarity(f1, f2)
    return scale(mean_over_axis(cos), -1.0) + Tensor(np.asarray(1.0, dtype=cos.dtype))


def total_loss(logits, labels, f1, f2, lam=DEFAULT_LAMBDA):
    """Return ``(total_tensor, LossBreakdown)`` with total = ce + lam * cons.

    ``f2`` may be None (single-stream models); the consistency term is then 0.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    ce = cross_entropy(logits, labels)
    if f2 is None or lam == 0:
        cons_val = float(consistency_loss(f1, f2).data) if f2 is not None else 0.0
        return ce, LossBreakdown(float(ce.data), cons_val, float(lam), float(ce.data))
    cons = consistency_loss(f1, f2)
    total = ce + scale(cons, lam)
    return total, LossBreakdown(float(ce.data), float(cons.data), float(lam), float(total.data))


def accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError("predictions and labels differ in length")
    if labels.size == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    return float(np.mean(predictions == labels))
