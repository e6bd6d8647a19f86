"""AdamW with global gradient-norm clipping and cosine learning-rate decay."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ContractError, NumericError
from .tensor import Tensor


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    total_steps: int = 1000
    clip_norm: float | None = 1.0


class AdamW:
    """Decoupled-weight-decay Adam.

    The learning rate for the update with index ``n`` (0-based) is
    ``lr * 0.5 * (1 + cos(pi * n / total_steps))``, so the first update uses the
    base rate and the schedule reaches zero after ``total_steps`` updates.
    """

    def __init__(self, params: Sequence[tuple[str, Tensor]] | Sequence[Tensor], cfg: AdamWConfig):
        named = [(p if isinstance(p, tuple) else (f"param{i}", p)) for i, p in enumerate(params)]
        self.params = named
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in named]
        self.v = [np.zeros_like(p.data) for _, p in named]
        self.last_grad_norm = 0.0

    def lr_at(self, n: int) -> float:
        total = max(self.cfg.total_steps, 1)
        n = min(n, total)
        return self.cfg.lr * 0.5 * (1.0 + math.cos(math.pi * n / total))

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
        grads = [p.grad for _, p in self.params]
        sq = sum(float(np.square(g, dtype=np.float64).sum()) for g in grads)
        norm = math.sqrt(sq)
        if not math.isfinite(norm):
            raise NumericError(f"non-finite gradient norm at step {self.step_count}")
        self.last_grad_norm = norm
        clip = self.cfg.clip_norm
        if clip is not None and norm > clip:
            scale = clip / (norm + 1e-12)
            grads = [g * scale for g in grads]

        b1, b2 = self.cfg.betas
        t = self.step_count + 1
        lr = self.lr_at(self.step_count)
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        wd = self.cfg.weight_decay
        for i, ((_, p), g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * np.square(g)
            upd = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.cfg.eps)
            if wd:
                upd = upd + wd * p.data
            p.data = (p.data - lr * upd).astype(p.dtype, copy=False)
        self.step_count += 1
