"""Experiment runners: single fold, k-fold cross-validation, training-fraction study.

All outputs are plain dicts of JSON-ready values; identical config and data
give identical dicts, so serialising with :func:`dumps` is byte-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, from_dict, to_dict
from .io import Checkpoint
from .metrics import METRIC_KEYS, MetricsReport, aggregate_folds
from .network import CCFNet, build_network
from .synth import Sample, kfold_split
from .training import TrainResult, evaluate_samples, load_state_dict, state_dict, train


@dataclass
class FoldResult:
    fold: int
    train_size: int
    result: TrainResult
    report: MetricsReport  # validation metrics of the best state

    def to_json(self) -> dict:
        return {"fold": self.fold, "train_size": self.train_size, "best_epoch": self.result.best_epoch, **self.report.to_json()}


def dumps(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2)


def subsample(indices, frac: float, seed: int) -> np.ndarray:
    """Seeded subset of ``round(frac·n)`` indices (at least 2, for batch norm)."""
    indices = np.asarray(indices)
    if not 0 < frac <= 1:
        raise ValueError("training fraction must lie in (0, 1]")
    if frac == 1:
        return indices
    k = min(len(indices), max(2, int(round(frac * len(indices)))))
    pick = np.random.default_rng([seed, 0xF4AC]).choice(len(indices), size=k, replace=False)
    return np.sort(indices[pick])


def fold_indices(cfg: RunConfig, n: int, fold: int):
    splits = kfold_split(n, cfg.folds, cfg.split_seed)
    if not 0 <= fold < len(splits):
        raise ValueError(f"fold {fold} out of range for {cfg.folds} folds")
    return splits[fold]


def run_fold(
    cfg: RunConfig,
    dataset: Sequence[Sample],
    fold: int,
    train_frac: Optional[float] = None,
    run_dir: Optional[Path] = None,
) -> FoldResult:
    train_idx, val_idx = fold_indices(cfg, len(dataset), fold)
    frac = cfg.train_frac if train_frac is None else train_frac
    train_idx = subsample(train_idx, frac, cfg.train.seed)
    result = train(cfg.train, dataset, (train_idx, val_idx), run_dir=run_dir)
    load_state_dict(result.net, result.best_state)
    report = evaluate_samples(result.net, [dataset[i] for i in val_idx], cfg.train.grid, cfg.train.radius_mm)
    return FoldResult(fold, len(train_idx), result, report)


def summarize(folds: Sequence[FoldResult]) -> dict:
    agg = aggregate_folds([f.report for f in folds])
    out = {"n_folds": agg.n_folds, "folds": [f.to_json() for f in folds]}
    for key in METRIC_KEYS:
        out[key] = {"mean": agg.mean[key], "std": agg.std[key]}
    return out


def crossval(cfg: RunConfig, dataset: Sequence[Sample], run_dir: Optional[Path] = None) -> dict:
    """Train and evaluate every fold; per-fold metrics plus mean and std per metric."""
    folds = []
    for k in range(cfg.folds):
        sub = Path(run_dir) / f"fold{k}" if run_dir is not None else None
        folds.append(run_fold(cfg, dataset, k, run_dir=sub))
    return summarize(folds)


def fracstudy(cfg: RunConfig, dataset: Sequence[Sample], fracs: Sequence[float], fold: int = 0) -> dict:
    """Validation score of one fold as the training split shrinks to each fraction."""
    rows = []
    for frac in fracs:
        fr = run_fold(cfg, dataset, fold, train_frac=frac)
        rows.append({"frac": float(frac), **fr.to_json()})
    return {"fold": fold, "fracs": [float(f) for f in fracs], "scores": [r["score"] for r in rows], "runs": rows}


def make_checkpoint(cfg: RunConfig, result: TrainResult, best: bool = True) -> Checkpoint:
    tensors = result.best_state if best else state_dict(result.net)
    epoch = result.best_epoch if best else len(result.history) - 1
    return Checkpoint(to_dict(cfg), dict(tensors), epoch, {"history": result.history})


def network_from_checkpoint(ckpt: Checkpoint) -> tuple[CCFNet, RunConfig]:
    cfg = from_dict(RunConfig, ckpt.config).validate()
    net = build_network(cfg.train.encoder, cfg.train.seed)
    load_state_dict(net, ckpt.tensors)
    return net, cfg
