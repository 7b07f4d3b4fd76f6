"""Segmentation losses: pixel BCE, soft Dice, focal Tversky, and their
weighted composite.

All losses take post-sigmoid probabilities and a binary target of the
same shape and return a scalar tensor that is differentiable with
respect to the probabilities. The stabilizer eps sits in numerator and
denominator of the overlap losses so an empty-empty pair scores
perfectly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

EPS = 1e-5
_CLAMP = 1e-7


@dataclass(frozen=True)
class TverskyParams:
    """False-negative weight, false-positive weight, and focal exponent."""

    alpha_t: float = 0.7
    beta_t: float = 0.3
    gamma: float = 4.0 / 3.0

    def __post_init__(self):
        if abs(self.alpha_t + self.beta_t - 1.0) > 1e-9:
            raise ValueError(f"alpha_t + beta_t must equal 1, got "
                             f"{self.alpha_t} + {self.beta_t}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass(frozen=True)
class CompositeWeights:
    w_bce: float = 1.0
    w_dice: float = 1.0
    w_ftl: float = 1.0

    def __post_init__(self):
        for name, w in (("w_bce", self.w_bce), ("w_dice", self.w_dice),
                        ("w_ftl", self.w_ftl)):
            if w < 0:
                raise ValueError(f"{name} must be non-negative, got {w}")


def _as_pair(pred, target) -> tuple[Tensor, Tensor]:
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if p.shape != t.shape:
        raise nm.ShapeError(f"loss shapes differ: pred {p.shape} vs target {t.shape}")
    return p, t


def bce_loss(pred_probs, target) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1-1e-7]."""
    p, t = _as_pair(pred_probs, target)
    p = nm.clamp(p, _CLAMP, 1.0 - _CLAMP)
    one = 1.0
    term = t * nm.tlog(p) + (one - t) * nm.tlog(one - p)
    return -term.mean()


def soft_dice_loss(pred_probs, target, eps: float = EPS) -> Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    p, t = _as_pair(pred_probs, target)
    inter = (p * t).sum()
    denom = p.sum() + t.sum() + eps
    return 1.0 - (inter * 2.0 + eps) / denom


def focal_tversky_loss(pred_probs, target, params: TverskyParams | None = None,
                       eps: float = EPS) -> Tensor:
    """(1 - Tversky index)^gamma with asymmetric FN/FP weighting."""
    params = params or TverskyParams()
    p, t = _as_pair(pred_probs, target)
    tp = (p * t).sum()
    fn = ((1.0 - p) * t).sum()
    fp = (p * (1.0 - t)).sum()
    index = (tp + eps) / (tp + fn * params.alpha_t + fp * params.beta_t + eps)
    return (1.0 - index) ** params.gamma


def composite_loss(pred_probs, target, weights: CompositeWeights | None = None,
                   tversky: TverskyParams | None = None) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the three terms plus a per-term breakdown for logging."""
    weights = weights or CompositeWeights()
    bce = bce_loss(pred_probs, target)
    dice = soft_dice_loss(pred_probs, target)
    ftl = focal_tversky_loss(pred_probs, target, tversky)
    total = bce * weights.w_bce + dice * weights.w_dice + ftl * weights.w_ftl
    breakdown = {"bce": float(bce.data), "dice": float(dice.data), "ftl": float(ftl.data)}
    return total, breakdown
