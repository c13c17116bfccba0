"""Classification, box-regression and mask losses with hand-written gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..heads import BoxPrediction, MaskPrediction
from ..tensor import Tensor, add
from .data import RoiBatch

# box regression targets are divided by these before the loss
BOX_TARGET_STD = np.array([0.1, 0.1, 0.2, 0.2])


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (float(g) / n),)

    return Tensor.from_op(np.asarray(loss), (logits,), backward)


def smooth_l1_box_loss(deltas: Tensor, labels: np.ndarray, targets: np.ndarray, beta: float = 1.0) -> Tensor:
    """Smooth-L1 on the positives' class-specific deltas, summed and divided by the RoI count."""
    n = deltas.shape[0]
    pos = np.flatnonzero(labels > 0)
    if pos.size == 0:
        return Tensor.from_op(np.asarray(0.0), (deltas,), lambda g: (np.zeros_like(deltas.data),))
    cols = 4 * (labels[pos] - 1)[:, None] + np.arange(4)[None, :]
    diff = deltas.data[pos[:, None], cols] - targets[pos] / BOX_TARGET_STD
    absd = np.abs(diff)
    quad = absd < beta
    loss = np.where(quad, 0.5 * diff**2 / beta, absd - 0.5 * beta).sum() / n

    def backward(g):
        grad = np.zeros_like(deltas.data)
        grad[pos[:, None], cols] = np.where(quad, diff / beta, np.sign(diff)) * (float(g) / n)
        return (grad,)

    return Tensor.from_op(np.asarray(loss), (deltas,), backward)


def mask_bce_loss(fused_logits: Tensor, classes: np.ndarray, targets: np.ndarray) -> Tensor:
    """Mean per-pixel binary cross-entropy on each positive's ground-truth class channel."""
    p = fused_logits.shape[0]
    if p == 0:
        return Tensor(np.asarray(0.0))
    rows = np.arange(p)
    x = fused_logits.data[rows, classes - 1]
    # log(1 + exp(-|x|)) form is stable for large |x|
    loss_map = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    count = loss_map.size
    loss = loss_map.sum() / count

    def backward(g):
        grad = np.zeros_like(fused_logits.data)
        grad[rows, classes - 1] = (1.0 / (1.0 + np.exp(-x)) - targets) * (float(g) / count)
        return (grad,)

    return Tensor.from_op(np.asarray(loss), (fused_logits,), backward)


@dataclass
class Losses:
    cls: Tensor
    box: Tensor
    mask: Tensor
    total: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return self.cls.item(), self.box.item(), self.mask.item(), self.total.item()


def compute_losses(boxpred: BoxPrediction, maskpred: MaskPrediction | None, batch: RoiBatch) -> Losses:
    """Unweighted sum of classification, box and mask losses.

    ``maskpred`` rows correspond to ``batch.positives`` in order (None when
    the batch has no positives).
    """
    cls = softmax_cross_entropy(boxpred.class_logits, batch.labels)
    box = smooth_l1_box_loss(boxpred.box_deltas, batch.labels, batch.box_targets)
    pos = batch.positives
    if maskpred is None or pos.size == 0:
        mask = Tensor(np.asarray(0.0))
    else:
        mask = mask_bce_loss(maskpred.fused_logits, batch.labels[pos], batch.mask_targets)
    return Losses(cls, box, mask, add(add(cls, box), mask))
