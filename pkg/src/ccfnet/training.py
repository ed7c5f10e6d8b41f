"""AdamW with decoupled weight decay, cosine annealing with warm restarts, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .codec import GridSpec, decode_arrays, encode_targets_batch
from .loss import LossWeights, total_loss
from .metrics import MetricsReport, evaluate
from .network import CCFNet, EncoderConfig, build_network
from .synth import AugmentPolicy, Sample, augment

logger = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass
class AdamWConfig:
    lr: float = 3e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: AdamWConfig) -> "AdamWState":
        return cls(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float) -> None:
    """One AdamW update, in place on the ``params`` arrays.

    ``w ← w − lr·m̂/(√v̂ + ε) − lr·λ·w`` with the decay applied to the
    pre-update weight, separately from the adaptive term.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        w -= step + lr * state.weight_decay * w


@dataclass
class LrSchedule:
    T_0: int = 10
    T_mult: int = 2
    eta_min: float = 0.0


def lr_at(schedule: LrSchedule, step: int, base_lr: float) -> float:
    """Cosine annealing with warm restarts; cycle lengths T_0, T_0·T_mult, ..."""
    if step < 0:
        raise ValueError("step must be >= 0")
    t_i, t_cur = schedule.T_0, step
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= schedule.T_mult
    lo = schedule.eta_min
    return lo + 0.5 * (base_lr - lo) * (1 + math.cos(math.pi * t_cur / t_i))


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    grid: GridSpec = field(default_factory=GridSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    augment: Optional[AugmentPolicy] = field(default_factory=AugmentPolicy)
    radius_mm: float = 6.0
    eval_batch: int = 32

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalization")
        if self.encoder.stride != self.grid.stride:
            raise ValueError(f"encoder stride {self.encoder.stride} != grid stride {self.grid.stride}")
        self.encoder.validate()
        if self.augment is not None:
            self.augment.validate()


@dataclass
class TrainResult:
    net: CCFNet
    history: list
    best_state: dict
    best_epoch: int
    optimizer: AdamWState


def state_dict(net: CCFNet) -> dict:
    out = {k: v.data.copy() for k, v in net.named_parameters()}
    out.update({k: v.copy() for k, v in net.named_buffers()})
    return out


def load_state_dict(net: CCFNet, state: dict) -> None:
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    missing = (set(params) | set(buffers)) - set(state)
    if missing:
        raise KeyError(f"state is missing {sorted(missing)[:3]}...")
    for k, p in params.items():
        p.data = np.array(state[k], dtype=p.data.dtype)
    for k, b in buffers.items():
        b[...] = state[k]


def stack_batch(samples: Sequence[Sample], grid: GridSpec):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    xy = np.stack([s.annotation.xy for s in samples])
    labels = np.stack([s.annotation.labels for s in samples])
    return images, encode_targets_batch(xy, labels, grid, dtype=np.float32)


def predict(net: CCFNet, images: np.ndarray, grid: GridSpec, batch: int = 32):
    """Eval-mode decode of ``[N,1,H,W]`` images to ``(xy [N,K,2], prob [N,K])``."""
    xys, probs = [], []
    with T.no_grad():
        for i in range(0, len(images), batch):
            out = net.forward(T.Tensor(images[i : i + batch]), mode="eval")
            xy, prob = decode_arrays(*out.arrays(), grid)
            xys.append(xy)
            probs.append(prob)
    return np.concatenate(xys), np.concatenate(probs)


def evaluate_samples(net: CCFNet, samples: Sequence[Sample], grid: GridSpec, radius_mm=6.0, batch=32) -> MetricsReport:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    xy, prob = predict(net, images, grid, batch)
    return evaluate(xy, prob, [s.annotation for s in samples], radius_mm)


def train_step(net: CCFNet, opt: AdamWState, images, targets, weights: LossWeights, lr: float):
    params = net.parameters()
    for p in params.values():
        p.grad = None
    out = net.forward(T.Tensor(images), mode="train")
    losses = total_loss(out, targets, weights)
    value = float(losses.total.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {losses.as_dict()}")
    T.backward(losses.total)
    adamw_step(
        {k: p.data for k, p in params.items()},
        {k: p.grad for k, p in params.items() if p.grad is not None},
        opt,
        lr,
    )
    return losses


def train(
    cfg: TrainConfig,
    dataset: Sequence[Sample],
    fold: tuple,
    run_dir: Optional[Path] = None,
    evaluate_every: int = 1,
) -> TrainResult:
    """Train on ``fold[0]`` indices, validating on ``fold[1]`` after every epoch.

    The learning rate is stepped per epoch. The best state is chosen by the
    validation overall score.
    """
    cfg.validate()
    train_idx, val_idx = (np.asarray(f, dtype=int) for f in fold)
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    net = build_network(cfg.encoder, cfg.seed)
    opt = AdamWState.from_config(cfg.optimizer)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    history: list[dict] = []
    best_state, best_epoch, best_score = state_dict(net), -1, -math.inf
    log_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "history.jsonl", "w")
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(cfg.schedule, epoch, cfg.optimizer.lr)
            order = rng.permutation(train_idx)
            sums: dict[str, float] = {}
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                batch = [dataset[i] for i in idx]
                if cfg.augment is not None:
                    batch = [augment(s, cfg.augment, rng) for s in batch]
                images, targets = stack_batch(batch, cfg.grid)
                losses = train_step(net, opt, images, targets, cfg.weights, lr)
                for k, v in losses.as_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            record = {"epoch": epoch, "lr": lr, "loss": {k: v / n_batches for k, v in sums.items()}}
            if len(val_idx) and ((epoch + 1) % evaluate_every == 0 or epoch == cfg.epochs - 1):
                report = evaluate_samples(net, [dataset[i] for i in val_idx], cfg.grid, cfg.radius_mm, cfg.eval_batch)
                record["val"] = report.to_json()
                score = report.score if report.score is not None else -math.inf
                if score > best_score:
                    best_score, best_epoch, best_state = score, epoch, state_dict(net)
            logger.info("epoch %d lr %.2e loss %.4f", epoch, lr, record["loss"].get("total", float("nan")))
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    if best_epoch < 0:
        best_state, best_epoch = state_dict(net), cfg.epochs - 1
    return TrainResult(net, history, best_state, best_epoch, opt)
