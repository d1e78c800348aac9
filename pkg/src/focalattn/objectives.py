"""Segmentation losses and overlap metrics.

Differentiable terms operate on autodiff Variables; metrics operate on plain
binary arrays.  All per-class terms return length-C vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, DomainError, Variable

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.25        # Dice/focal mix
    mu: float = 0.0625         # IoU regression weight
    lam: float = 1e-4          # l2 weight on a learnable bias
    focal_gamma: float = 2.0
    dice_epsilon: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.mu < 0 or self.lam < 0 or self.focal_gamma < 0:
            raise ValueError("mu, lam and focal_gamma must be non-negative")
        if self.dice_epsilon <= 0:
            raise ValueError("dice_epsilon must be positive")


@dataclass
class LossBreakdown:
    total: Variable
    dice_term: float
    focal_term: float
    iou_term: float
    reg_term: float
    per_class: list[dict] = field(default_factory=list)

    def as_row(self) -> dict[str, float]:
        return {"loss_total": float(self.total.value), "loss_dice": self.dice_term,
                "loss_focal": self.focal_term, "loss_iou": self.iou_term,
                "loss_reg": self.reg_term}


def _check_pair(pred: Variable, target: np.ndarray) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise DimensionError(f"prediction {pred.shape} and target {t.shape} differ in shape")
    return t


def dice_loss(pred: Variable, target, epsilon: float = 1.0) -> Variable:
    """Soft Dice per class: ``1 - (2 sum(p y) + eps) / (sum p + sum y + eps)``."""
    t = _check_pair(pred, target)
    inter = ad.sum(pred * t, axis=1)
    denom = ad.sum(pred, axis=1) + (t.sum(axis=1) + epsilon)
    return 1.0 - (inter * 2.0 + epsilon) / denom


def focal_loss(pred: Variable, target, focal_gamma: float = 2.0, clamp: bool = True) -> Variable:
    """Per-class mean of ``-(1 - p_t)^g log p_t`` with ``p_t`` the true-label probability."""
    t = _check_pair(pred, target)
    if clamp:
        pred = ad.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    elif np.any(pred.value <= 0) or np.any(pred.value >= 1):
        raise DomainError("focal_loss needs probabilities strictly inside (0, 1)")
    p_t = pred * t + (1.0 - pred) * (1.0 - t)
    nll = -ad.log(p_t)
    if focal_gamma != 0:
        nll = ad.power(1.0 - p_t, focal_gamma) * nll
    return ad.mean(nll, axis=1)


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) > threshold).astype(np.float64)


def iou_metric(pred, target) -> np.ndarray:
    """Per-class Jaccard index of binary masks; two empty masks score 1."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(target, dtype=bool)
    if p.shape != t.shape:
        raise DimensionError(f"masks differ in shape: {p.shape} vs {t.shape}")
    inter = (p & t).sum(axis=-1)
    union = (p | t).sum(axis=-1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def dice_metric(pred, target) -> np.ndarray:
    """Per-class Dice of binary masks; two empty masks score 1."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(target, dtype=bool)
    if p.shape != t.shape:
        raise DimensionError(f"masks differ in shape: {p.shape} vs {t.shape}")
    inter = (p & t).sum(axis=-1)
    size = p.sum(axis=-1) + t.sum(axis=-1)
    return np.where(size == 0, 1.0, 2.0 * inter / np.maximum(size, 1))


def mse_iou_loss(iou_pred: Variable, pred_probs, target, threshold: float = 0.5) -> Variable:
    """Squared error between predicted IoU and the realised IoU of the binarised mask.

    The realised IoU is a constant target; no gradient flows through it.
    """
    probs = pred_probs.value if isinstance(pred_probs, Variable) else np.asarray(pred_probs)
    true_iou = iou_metric(binarize(probs, threshold), np.asarray(target) > 0.5)
    if iou_pred.shape != true_iou.shape:
        raise DimensionError(f"iou_pred {iou_pred.shape} does not match {true_iou.shape} classes")
    diff = iou_pred - true_iou
    return diff * diff


def composite_loss(output, target, weights: LossWeights, bias=None) -> LossBreakdown:
    """Sum over classes of weighted Dice, focal and IoU-regression terms plus
    ``lam * ||delta||^2`` when ``bias`` is a learnable Variable.
    """
    a, mu = weights.alpha, weights.mu
    dice = dice_loss(output.mask_probs, target, weights.dice_epsilon)
    focal = focal_loss(output.mask_probs, target, weights.focal_gamma)
    mse = mse_iou_loss(output.iou_pred, output.mask_probs, target)

    per_class_total = dice * (1.0 - a) + focal * a + mse * mu
    total = ad.sum(per_class_total)
    reg = 0.0
    if isinstance(bias, Variable):
        reg_v = ad.sum(bias * bias)
        reg = float(reg_v.value)
        if weights.lam:
            total = total + reg_v * weights.lam

    per_class = [{"dice": float(d), "focal": float(f), "iou": float(m)}
                 for d, f, m in zip(dice.value, focal.value, mse.value)]
    return LossBreakdown(total, float(dice.value.sum()), float(focal.value.sum()),
                         float(mse.value.sum()), reg, per_class)
