"""Evaluation protocol: recall within a radius, AUC at true points, product score."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .codec import DISC_INDEX, OBJECT_IDS, VERTEBRA_INDEX, Detection, SpineAnnotation

METRIC_KEYS = ("recall_disc", "recall_vertebra", "auc_disc", "auc_vertebra", "score")


@dataclass
class MetricsReport:
    recall_disc: float
    recall_vertebra: float
    auc_disc: Optional[float]  # None when a class lacks positives or negatives
    auc_vertebra: Optional[float]
    score: Optional[float]
    counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class FoldAggregate:
    mean: dict
    std: dict
    n_folds: int


def match_and_recall(detections, gt: SpineAnnotation, radius_mm: float = 6.0):
    """Per-object hit flags and per-class recall.

    ``detections`` is a list of :class:`Detection` (ids must match the
    annotation) or a ``[11, 2]`` array of (x, y). A hit is a distance of at
    most ``radius_mm`` after converting pixels with the annotation spacing.
    """
    if gt.spacing_mm <= 0:
        raise ValueError("annotation spacing_mm must be positive")
    if len(detections) and isinstance(detections[0], Detection):
        ids = tuple(d.id for d in detections)
        if ids != OBJECT_IDS:
            raise ValueError(f"detection ids {ids} do not match {OBJECT_IDS}")
        xy = np.array([[d.x, d.y] for d in detections])
    else:
        xy = np.asarray(detections, dtype=float)
    dist_mm = np.linalg.norm(xy - gt.xy, axis=1) * gt.spacing_mm
    hits = dist_mm <= radius_mm
    return {
        "hits": hits,
        "recall_disc": float(hits[DISC_INDEX].mean()),
        "recall_vertebra": float(hits[VERTEBRA_INDEX].mean()),
    }


def auc(scores: Sequence[float], labels: Sequence) -> Optional[float]:
    """Mann–Whitney AUC with ties counted one half; None if a class is absent."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def overall_score(recall_disc, recall_vertebra, auc_disc, auc_vertebra) -> float:
    """100 × mean localization recall × mean classification AUC."""
    return 100.0 * (recall_disc + recall_vertebra) / 2 * (auc_disc + auc_vertebra) / 2


def evaluate(pred_xy, pred_prob, annotations: Sequence[SpineAnnotation], radius_mm: float = 6.0) -> MetricsReport:
    """Pool hits and true-point probabilities over a set of samples (one fold)."""
    pred_xy = np.asarray(pred_xy, dtype=float)
    pred_prob = np.asarray(pred_prob, dtype=float)
    hits = np.stack([match_and_recall(pred_xy[n], a, radius_mm)["hits"] for n, a in enumerate(annotations)])
    labels = np.stack([a.labels for a in annotations])
    out = {}
    for cls, idx in (("disc", DISC_INDEX), ("vertebra", VERTEBRA_INDEX)):
        h = hits[:, idx]
        out[f"recall_{cls}"] = float(h.mean())
        out[f"auc_{cls}"] = auc(pred_prob[:, idx][h], labels[:, idx][h])
        out[f"hits_{cls}"] = int(h.sum())
        out[f"total_{cls}"] = int(h.size)
    aucs = [a for a in (out["auc_disc"], out["auc_vertebra"]) if a is not None]
    score = None
    if aucs:
        score = 100.0 * (out["recall_disc"] + out["recall_vertebra"]) / 2 * sum(aucs) / len(aucs)
    counts = {k: out.pop(k) for k in ("hits_disc", "total_disc", "hits_vertebra", "total_vertebra")}
    return MetricsReport(score=score, counts=counts, **out)


def aggregate_folds(reports: Sequence[MetricsReport]) -> FoldAggregate:
    """Mean and sample standard deviation (n − 1) per metric; absent values skipped."""
    if not reports:
        raise ValueError("no fold reports to aggregate")
    mean, std = {}, {}
    for key in METRIC_KEYS:
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if not vals:
            mean[key] = std[key] = None
            continue
        mean[key] = float(np.mean(vals))
        std[key] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return FoldAggregate(mean, std, len(reports))


def mm_to_px(radius_mm: float, spacing_mm: float) -> float:
    return radius_mm / spacing_mm if spacing_mm > 0 else math.inf
