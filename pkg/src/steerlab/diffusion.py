"""Forward noising, epsilon-prediction loss, deterministic DDIM sampling with
classifier-free guidance, and DDIM inversion.

A *denoise function* is any callable ``fn(x_t, t, c) -> eps_hat`` where ``x_t`` is an
``[B, H, W, 3]`` array, ``t`` an integer array of shape ``[B]`` and ``c`` a
``[B, cond_dim]`` array. It may return a :class:`Tensor` or an ndarray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, mse_loss, no_grad
from .errors import ConfigurationError, ContractError, NumericError

DenoiseFn = Callable[[np.ndarray, np.ndarray, np.ndarray], "Tensor | np.ndarray"]


@dataclass(frozen=True)
class NoiseSchedule:
    T_train: int
    betas: np.ndarray
    alpha_bars: np.ndarray  # alpha_bars[t-1] is the cumulative product for timestep t

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative signal fraction at timestep(s) ``t``; ``t = 0`` is clean data."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T_train):
            raise IndexError(f"timestep outside [0, {self.T_train}]")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def make_linear_schedule(T_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T_train < 1:
        raise ConfigurationError("T_train must be positive")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(T_train, betas, alpha_bars)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 30
    guidance_scale: float = 7.5
    eta: float = 0.0
    inversion_iters: int = 1

    def __post_init__(self):
        if self.eta != 0.0:
            raise ConfigurationError("only deterministic DDIM (eta = 0) is supported")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.inversion_iters < 1:
            raise ConfigurationError("inversion_iters must be >= 1")


def timestep_grid(steps: int, T_train: int) -> np.ndarray:
    """Evenly spaced timesteps over [1, T_train], descending (sampling order)."""
    if steps > T_train:
        raise ConfigurationError(f"steps={steps} exceeds T_train={T_train}")
    grid = np.unique(np.round(np.linspace(1, T_train, steps)).astype(np.int64))
    if grid.size != steps:
        raise ConfigurationError(f"cannot place {steps} distinct steps in [1, {T_train}]")
    return grid[::-1].copy()


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` scalar or per-sample."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ContractError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar(t)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


def epsilon_loss(model: DenoiseFn, x0: np.ndarray, c: np.ndarray, rng: np.random.Generator,
                 sched: NoiseSchedule, step: int | None = None) -> Tensor:
    """Mean squared error between predicted and drawn noise, ``t ~ U{1..T}``."""
    B = x0.shape[0]
    t = rng.integers(1, sched.T_train + 1, size=B)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    x_t = q_sample(x0, t, eps, sched)
    pred = model(x_t, t, c)
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    loss = mse_loss(pred, eps)
    val = float(loss.data)
    if not math.isfinite(val):
        where = f" at step {step}" if step is not None else ""
        raise NumericError(f"non-finite epsilon loss{where} (t range {t.min()}..{t.max()})")
    return loss


def _move(x: np.ndarray, eps_hat: np.ndarray, ab_from: float, ab_to: float) -> np.ndarray:
    if ab_from <= 0.0:
        raise NumericError("alpha_bar is zero; x0 estimate undefined")
    x0_hat = (x - math.sqrt(1.0 - ab_from) * eps_hat) / math.sqrt(ab_from)
    return (math.sqrt(ab_to) * x0_hat + math.sqrt(1.0 - ab_to) * eps_hat).astype(x.dtype, copy=False)


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from timestep ``t`` to ``t_prev < t``."""
    if not t > t_prev >= 0:
        raise ContractError(f"ddim_step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    return _move(np.asarray(x_t), np.asarray(eps_hat), float(sched.alpha_bar(t)), float(sched.alpha_bar(t_prev)))


def ddim_inverse_step(x_prev: np.ndarray, eps_hat: np.ndarray, t_prev: int, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Algebraic inverse of :func:`ddim_step` for the same ``eps_hat``."""
    if not t > t_prev >= 0:
        raise ContractError(f"ddim_inverse_step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    return _move(np.asarray(x_prev), np.asarray(eps_hat), float(sched.alpha_bar(t_prev)), float(sched.alpha_bar(t)))


@dataclass
class Trajectory:
    timesteps: list[int]
    latent_norms: list[float] = field(default_factory=list)
    z_T: np.ndarray | None = None

    def to_json(self) -> dict:
        return {"timesteps": list(self.timesteps), "latent_norms": list(self.latent_norms)}


def _eval(model: DenoiseFn, x, t, c) -> np.ndarray:
    out = model(x, np.full(x.shape[0], t, dtype=np.int64), c)
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def guided_eps(model: DenoiseFn, x: np.ndarray, t: int, c: np.ndarray, uncond: np.ndarray | None,
               guidance_scale: float) -> np.ndarray:
    """Classifier-free guided noise estimate; skips the unconditional pass at w = 1."""
    if guidance_scale == 1.0 or uncond is None:
        if guidance_scale != 1.0:
            raise ConfigurationError("guidance_scale != 1 needs an unconditional embedding")
        return _eval(model, x, t, c)
    B = x.shape[0]
    both = _eval(model, np.concatenate([x, x]), t, np.concatenate([c, uncond]))
    e_c, e_u = both[:B], both[B:]
    return e_u + guidance_scale * (e_c - e_u)


def sample(model: DenoiseFn, c: np.ndarray, sampler: SamplerConfig, z_T: np.ndarray, sched: NoiseSchedule,
           uncond: np.ndarray | None = None, record_norms: bool = False) -> tuple[np.ndarray, Trajectory]:
    """Run the DDIM sampler from the supplied initial latent ``z_T``.

    Steering or other adapters are bound into ``model`` by the caller.
    """
    grid = timestep_grid(sampler.steps, sched.T_train)
    if uncond is not None and uncond.ndim == 1:
        uncond = np.broadcast_to(uncond, c.shape)
    x = np.array(z_T, dtype=np.float32)
    traj = Trajectory(timesteps=[int(t) for t in grid], z_T=np.array(z_T, dtype=np.float32))
    with no_grad():
        for i, t in enumerate(grid):
            t_prev = int(grid[i + 1]) if i + 1 < len(grid) else 0
            eps = guided_eps(model, x, int(t), c, uncond, sampler.guidance_scale)
            x = ddim_step(x, eps, int(t), t_prev, sched)
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite latent after sampling step {i} (t={int(t)})")
            if record_norms:
                traj.latent_norms.append(float(np.linalg.norm(x.astype(np.float64))))
    return x, traj


def ddim_invert(model: DenoiseFn, x0: np.ndarray, c: np.ndarray, sampler: SamplerConfig,
                sched: NoiseSchedule) -> np.ndarray:
    """Run the DDIM recursion backwards from an image to its initial latent.

    At each move ``t_prev -> t`` the noise is evaluated at timestep ``t`` on the
    current estimate; ``inversion_iters > 1`` refines that estimate by fixed-point
    iteration on the noisier-side latent.
    """
    if sampler.guidance_scale != 1.0:
        raise ConfigurationError("inversion runs without guidance (guidance_scale must be 1)")
    grid = timestep_grid(sampler.steps, sched.T_train)[::-1]
    x = np.array(x0, dtype=np.float32)
    with no_grad():
        for i, t in enumerate(grid):
            t_prev = int(grid[i - 1]) if i > 0 else 0
            x_next = ddim_inverse_step(x, _eval(model, x, int(t), c), t_prev, int(t), sched)
            for _ in range(sampler.inversion_iters - 1):
                x_next = ddim_inverse_step(x, _eval(model, x_next, int(t), c), t_prev, int(t), sched)
            x = x_next
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite latent during inversion step {i} (t={int(t)})")
    return x
