"""Training loops: backbone pretraining with condition dropout and adapter fitting
on a frozen backbone."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import AdamW, AdamWConfig, Tensor, backward
from .data import DatasetSplit, PromptEncoder
from .diffusion import NoiseSchedule, epsilon_loss
from .unet import UNet


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    cond_dropout: float = 0.0
    ema_decay: float = 0.0

    def optimizer(self) -> AdamWConfig:
        return AdamWConfig(lr=self.lr, weight_decay=self.weight_decay, total_steps=max(self.steps, 1),
                           clip_norm=self.clip_norm)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)

    def decile_means(self) -> tuple[float, float]:
        """Mean loss over the first and the last tenth of training."""
        n = max(len(self.losses) // 10, 1)
        return float(np.mean(self.losses[:n])), float(np.mean(self.losses[-n:]))

    def summary(self) -> dict:
        if not self.losses:
            return {"steps": 0}
        first, last = self.decile_means()
        return {"steps": len(self.losses), "first_decile_loss": first, "last_decile_loss": last,
                "final_loss": self.losses[-1]}


def fit(params: Sequence[tuple[str, Tensor]], loss_fn: Callable[[int], Tensor], cfg: TrainConfig) -> TrainLog:
    """Minimise ``loss_fn(step)`` over ``params`` with AdamW.

    With ``cfg.ema_decay > 0`` the parameters end at their exponential moving
    average over the run rather than at the last iterate.
    """
    log = TrainLog()
    if cfg.steps <= 0:
        return log
    params = list(params)
    opt = AdamW(params, cfg.optimizer())
    ema = [p.data.astype(np.float64) for _, p in params] if cfg.ema_decay > 0 else None
    for step in range(cfg.steps):
        loss = loss_fn(step)
        log.losses.append(float(loss.data))
        opt.zero_grad()
        backward(loss)
        opt.step()
        log.grad_norms.append(opt.last_grad_norm)
        if ema is not None:
            # warm-up keeps early averages from being dominated by the initialisation
            d = min(cfg.ema_decay, (1.0 + step) / (10.0 + step))
            for i, (_, p) in enumerate(params):
                ema[i] *= d
                ema[i] += (1.0 - d) * p.data
    if ema is not None:
        for (_, p), avg in zip(params, ema):
            p.data = avg.astype(p.dtype)
    return log


def pretrain_backbone(model: UNet, encoder: PromptEncoder, split: DatasetSplit, sched: NoiseSchedule,
                      cfg: TrainConfig, rng: np.random.Generator) -> TrainLog:
    """Joint training of the denoiser and the prompt embedding table.

    With probability ``cfg.cond_dropout`` a sample's condition is replaced by the
    zero vector, which serves as the unconditional embedding for guidance.
    """
    params = model.trainable_parameters() + [("encoder." + n, p) for n, p in encoder.trainable_parameters()]

    def loss_fn(step: int) -> Tensor:
        idx = rng.integers(0, len(split), size=cfg.batch)
        c = encoder(split.content_ids[idx], split.style_ids[idx])
        if cfg.cond_dropout > 0:
            keep = (rng.random(cfg.batch) >= cfg.cond_dropout).astype(np.float32)
            c = c * keep[:, None]
        return epsilon_loss(model.forward, split.images[idx], c, rng, sched, step)

    return fit(params, loss_fn, cfg)


def train_on_style(denoise, params: Sequence[tuple[str, Tensor]], split: DatasetSplit, cond: np.ndarray,
                   sched: NoiseSchedule, cfg: TrainConfig, rng: np.random.Generator) -> TrainLog:
    """Fit adapter ``params`` with the epsilon loss; ``cond[i]`` is the condition of image ``i``."""

    def loss_fn(step: int) -> Tensor:
        idx = rng.integers(0, len(split), size=cfg.batch)
        return epsilon_loss(denoise, split.images[idx], cond[idx], rng, sched, step)

    return fit(params, loss_fn, cfg)
