"""AdamW with decoupled weight decay, the warm-up + cosine-restart
learning-rate schedule, and the adapter training loop.

The loop is bit-reproducible for a fixed config seed: batch sampling,
augmentation, and prompt draws all derive from it, and every update is
plain deterministic numpy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .backbone import PromptSet, SegmentationModel
from .data import SegSample, augment, derive_seed
from .losses import CompositeWeights, TverskyParams, composite_loss
from .numerics import Tensor


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; carries the failing step index."""

    def __init__(self, step: int, what: str):
        super().__init__(f"training diverged at step {step}: {what}")
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 1000
    total_steps: int = 2000       # paper scale: 20000
    batch_size: int = 4           # paper scale: 3
    seed: int = 0
    restart_period: int = 1000    # first cosine cycle length
    restart_mult: int = 2
    min_lr: float = 0.0
    clip_norm: float = 1.0
    augment: bool = True
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} must be smaller than "
                             f"total_steps {self.total_steps}")
        if self.restart_period < 1 or self.restart_mult < 1:
            raise ValueError("restart period and multiplier must be >= 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to the base lr, then cosine annealing with warm
    restarts whose period starts at restart_period and multiplies."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    t = step - cfg.warmup_steps
    period = cfg.restart_period
    while t >= period:
        t -= period
        period *= cfg.restart_mult
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * t / period))


class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
               state: AdamWState, cfg: TrainConfig, lr_t: float) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.isfinite(g).all():
            raise TrainingDiverged(state.t, "non-finite gradient")
        m = state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g
        v = state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        p.data = p.data - lr_t * (update + cfg.weight_decay * p.data)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for i in range(len(grads)):
            grads[i] = grads[i] * scale
    return total


@dataclass
class StepRecord:
    step: int
    lr: float
    total: float
    bce: float
    dice: float
    ftl: float


def train_adapters(model: SegmentationModel, trainable: Sequence[Tensor],
                   samples: Sequence[SegSample], cfg: TrainConfig,
                   weights: CompositeWeights | None = None,
                   tversky: TverskyParams | None = None,
                   prompt_fn: Callable[[np.ndarray, np.random.Generator], PromptSet] | None = None,
                   log_path=None,
                   checkpoint_fn: Callable[[int], None] | None = None) -> list[StepRecord]:
    """Run the training loop; returns the per-step loss log.

    `trainable` is the ordered list of tensors receiving updates (the
    adapter A/B factors). `prompt_fn` draws the per-sample training
    prompts; None trains unprompted. `checkpoint_fn` is invoked every
    cfg.checkpoint_every steps and at the end, after the corresponding
    update, so a divergence abort always leaves the last good snapshot.
    """
    if not samples:
        raise ValueError("no training samples")
    weights = weights or CompositeWeights()
    params = list(trainable)
    state = AdamWState(params)
    batch_rng = np.random.default_rng(derive_seed(cfg.seed, 0xBA7C4))
    history: list[StepRecord] = []

    writer = None
    fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "total", "bce", "dice", "ftl"])

    try:
        for step in range(cfg.total_steps):
            lr_t = lr_at(step, cfg)
            idxs = batch_rng.integers(0, len(samples), size=cfg.batch_size)
            losses = []
            parts_sum = {"bce": 0.0, "dice": 0.0, "ftl": 0.0}
            for slot, i in enumerate(idxs):
                s = samples[int(i)]
                if cfg.augment:
                    s = augment(s, derive_seed(cfg.seed, step, slot))
                prompts = None
                if prompt_fn is not None:
                    prng = np.random.default_rng(derive_seed(cfg.seed, step, slot, 0x9))
                    prompts = prompt_fn(s.mask, prng)
                logits = model(Tensor(s.image), prompts)
                probs = nm.sigmoid(nm.reshape(logits, s.mask.shape))
                loss, parts = composite_loss(probs, Tensor(s.mask), weights, tversky)
                losses.append(loss)
                for k, v in parts.items():
                    parts_sum[k] += v / cfg.batch_size

            total = losses[0]
            for extra in losses[1:]:
                total = total + extra
            total = total * (1.0 / cfg.batch_size)
            if not np.isfinite(total.data):
                raise TrainingDiverged(step, f"loss={float(total.data)}")
            total.backward()
            grads = []
            for p in params:
                grads.append(p.grad if p.grad is not None else np.zeros_like(p.data))
                p.grad = None
            clip_global_norm(grads, cfg.clip_norm)
            adamw_step(params, grads, state, cfg, lr_t)

            rec = StepRecord(step, lr_t, float(total.data), parts_sum["bce"],
                             parts_sum["dice"], parts_sum["ftl"])
            history.append(rec)
            if writer is not None:
                writer.writerow([rec.step, repr(rec.lr), repr(rec.total),
                                 repr(rec.bce), repr(rec.dice), repr(rec.ftl)])
            if checkpoint_fn is not None and (step + 1) % cfg.checkpoint_every == 0:
                checkpoint_fn(step)
        if checkpoint_fn is not None and cfg.total_steps % cfg.checkpoint_every != 0:
            checkpoint_fn(cfg.total_steps - 1)
    finally:
        if fh is not None:
            fh.close()
    return history
