"""Masked multi-term training objective.

All averages use global counts: ``N`` is every heatmap position across
batch and objects, ``M`` every position of the Ω mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

BCE_EPS = 1e-7


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_h: float = 1.0
    w_f: float = 2.0
    w_c: float = 1e-3

    def __post_init__(self):
        if min(self.w_h, self.w_f, self.w_c) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    L_h: Tensor
    L_f_x: Tensor
    L_f_y: Tensor
    L_c: Tensor
    total: Tensor
    N: int
    M: int

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k).data) for k in ("L_h", "L_f_x", "L_f_y", "L_c", "total")}


def _check(a, b, what):
    if tuple(a.shape) != tuple(np.shape(b)):
        raise ShapeError(f"{what}: prediction {a.shape} vs target {np.shape(b)}")


def _mask(pred: Tensor, omega) -> tuple[np.ndarray, int]:
    omega = np.asarray(omega, dtype=bool)
    _check(pred, omega, "mask")
    m = int(omega.sum())
    if m == 0:
        raise EmptyMaskError("Ω mask is empty")
    return omega.astype(pred.dtype), m


def coarse_loss(pred: Tensor, target) -> Tensor:
    _check(pred, target, "coarse_loss")
    return T.mean(T.square(pred - np.asarray(target, dtype=pred.dtype)))


def fine_loss(pred_x: Tensor, target_x, pred_y: Tensor, target_y, omega) -> tuple[Tensor, Tensor]:
    """Smooth-L1 (β = 1) on the scaled offsets, averaged over the Ω positions."""
    _check(pred_x, target_x, "fine_loss x")
    _check(pred_y, target_y, "fine_loss y")
    mask, m = _mask(pred_x, omega)
    lx = T.tsum(T.smooth_l1(pred_x - np.asarray(target_x, dtype=pred_x.dtype)) * mask) * (1.0 / m)
    ly = T.tsum(T.smooth_l1(pred_y - np.asarray(target_y, dtype=pred_y.dtype)) * mask) * (1.0 / m)
    return lx, ly


def category_loss(pred: Tensor, target, omega) -> Tensor:
    """Binary cross-entropy over the Ω positions, probabilities clamped to [ε, 1−ε]."""
    _check(pred, target, "category_loss")
    mask, m = _mask(pred, omega)
    c = np.asarray(target, dtype=pred.dtype)
    p = T.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    bce = T.log(p) * c + T.log(1.0 - p) * (1.0 - c)
    return T.tsum(bce * mask) * (-1.0 / m)


def combine(L_h, L_f_x, L_f_y, L_c, weights: LossWeights = LossWeights()):
    return weights.w_h * L_h + weights.w_f * (L_f_x + L_f_y) + weights.w_c * L_c


def total_loss(output, targets, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted objective between a :class:`NetworkOutput` and batched :class:`TargetMaps`."""
    L_h = coarse_loss(output.coarse, targets.heatmap)
    L_f_x, L_f_y = fine_loss(output.fine_x, targets.fine_x, output.fine_y, targets.fine_y, targets.omega)
    L_c = category_loss(output.category, targets.category, targets.omega)
    total = combine(L_h, L_f_x, L_f_y, L_c, weights)
    return LossBreakdown(L_h, L_f_x, L_f_y, L_c, total, int(output.coarse.size), int(np.sum(targets.omega)))
