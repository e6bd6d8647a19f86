"""Prompt-conditioned, timestep-gated AdaGN steering of a frozen denoiser.

For a selected block with output ``h`` the injected residual is::

    delta = s * gate(t_frac) * (gamma(v) * GN(h) + beta(v)),   v = g(c)

where ``g`` is a two-layer SiLU MLP producing a ``k``-dimensional code and
``gamma``/``beta`` are zero-initialised linear maps ``k -> channels``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, functional as F, no_grad
from .autodiff.nn import Linear, Module
from .errors import ConfigurationError, ContractError
from .unet import PLACEMENTS, BlockDescriptor, ForwardContext, UNet, select_blocks


@dataclass(frozen=True)
class SteeringConfig:
    k: int = 16
    placement: tuple[str, ...] = ("mid", "up")
    gate_center: float = 0.5
    gate_steepness: float = 10.0
    hidden_mult: int = 4

    def __post_init__(self):
        object.__setattr__(self, "placement", tuple(sorted(set(self.placement))))
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if not self.placement:
            raise ConfigurationError("placement must be nonempty")
        if not 0.0 < self.gate_center < 1.0:
            raise ConfigurationError("gate_center must lie in (0, 1)")
        if not self.gate_steepness > 0:
            raise ConfigurationError("gate_steepness must be positive")


def gate(t_frac, center: float = 0.5, steepness: float = 10.0):
    """``sigmoid(steepness * (center - t_frac))``; ``t_frac = 1`` is pure noise."""
    z = steepness * (center - np.asarray(t_frac, dtype=np.float64))
    out = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(out) if out.ndim == 0 else out


class CodeGenerator(Module):
    def __init__(self, cond_dim: int, k: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(cond_dim, hidden, rng)
        self.fc2 = Linear(hidden, k, rng)

    def forward(self, c) -> Tensor:
        return self.fc2(F.silu(self.fc1(c)))


class BlockProjection(Module):
    """Zero-initialised per-block affine projections ``k -> channels``."""

    def __init__(self, k: int, channels: int):
        self.gamma = Linear(k, channels, zero_init=True)
        self.beta = Linear(k, channels, zero_init=True)


class SteeringModule(Module):
    def __init__(self, cfg: SteeringConfig, descriptors: Sequence[BlockDescriptor], cond_dim: int,
                 groups: int, rng: np.random.Generator):
        self.cfg = cfg
        self.groups = groups
        self.g = CodeGenerator(cond_dim, cfg.k, cfg.hidden_mult * cfg.k, rng)
        self.blocks = select_blocks(descriptors, cfg.placement)
        self.block_ids = [d.block_id for d in self.blocks]
        self.proj: list[BlockProjection] = [BlockProjection(cfg.k, d.channels) for d in self.blocks]
        self._index = {bid: i for i, bid in enumerate(self.block_ids)}

    def encode_code(self, c) -> Tensor:
        return self.g(c)

    def projection(self, block_id: str) -> BlockProjection:
        try:
            return self.proj[self._index[block_id]]
        except KeyError:
            raise ContractError(f"block {block_id} is not in the steering placement") from None

    def steering_delta(self, h: Tensor, v: Tensor, t_frac, s: float, block_id: str) -> Tensor:
        """The residual addend for one block; ``t_frac`` scalar or per-sample."""
        p = self.projection(block_id)
        B, _, _, C = h.shape
        if v.shape != (B, self.cfg.k):
            raise ContractError(f"code shape {v.shape} does not match batch {B} and k={self.cfg.k}")
        if p.gamma.out_features != C:
            raise ContractError(f"block {block_id} expects {p.gamma.out_features} channels, got {C}")
        gam = p.gamma(v).reshape(B, 1, 1, C)
        bet = p.beta(v).reshape(B, 1, 1, C)
        f = np.broadcast_to(gate(t_frac, self.cfg.gate_center, self.cfg.gate_steepness), (B,))
        coef = (s * f).astype(h.dtype).reshape(B, 1, 1, 1)
        return (gam * F.group_norm(h, self.groups) + bet) * coef

    def at(self, scale: float, skip_when_off: bool = True) -> "SteeringAdapter":
        return SteeringAdapter(self, scale, skip_when_off)

    def metadata(self) -> dict[str, np.ndarray]:
        mask = [1.0 if p in self.cfg.placement else 0.0 for p in PLACEMENTS]
        return {
            "meta.k": np.array([self.cfg.k], dtype=np.float32),
            "meta.placement": np.array(mask, dtype=np.float32),
            "meta.gate_center": np.array([self.cfg.gate_center], dtype=np.float32),
            "meta.gate_steepness": np.array([self.cfg.gate_steepness], dtype=np.float32),
            "meta.hidden_mult": np.array([self.cfg.hidden_mult], dtype=np.float32),
        }


def config_from_metadata(meta: dict[str, np.ndarray]) -> SteeringConfig:
    placement = tuple(p for p, m in zip(PLACEMENTS, meta["meta.placement"]) if m > 0.5)
    return SteeringConfig(
        k=int(meta["meta.k"][0]),
        placement=placement,
        gate_center=float(meta["meta.gate_center"][0]),
        gate_steepness=float(meta["meta.gate_steepness"][0]),
        hidden_mult=int(meta["meta.hidden_mult"][0]),
    )


@dataclass
class SteeringAdapter:
    """A steering module bound to a runtime scale, usable in a denoiser adapter set.

    With ``skip_when_off`` a zero effective coefficient skips the delta computation;
    the result is identical to adding the exact-zero delta.
    """
    module: SteeringModule
    scale: float = 1.0
    skip_when_off: bool = True
    record: dict | None = field(default=None, repr=False)

    def begin(self, ctx: ForwardContext):
        if self.skip_when_off and self.scale == 0.0:
            return None
        return self.module.encode_code(ctx.c), ctx.t_frac

    def delta(self, block: BlockDescriptor, h: Tensor, state) -> Tensor | None:
        if state is None or block.block_id not in self.module._index:
            return None
        v, t_frac = state
        d = self.module.steering_delta(h, v, t_frac, self.scale, block.block_id)
        if self.record is not None:
            self.record.setdefault(block.block_id, []).append(d.data.copy())
        return d


def verify_zero_equivalence(model: UNet, steering: SteeringModule, x: np.ndarray, t: np.ndarray,
                            c: np.ndarray, scale: float = 1.0) -> float:
    """Max |forward with steering - forward without| over a probe batch."""
    with no_grad():
        base = model.forward(x, t, c).data
        steered = model.forward(x, t, c, [steering.at(scale, skip_when_off=False)]).data
    return float(np.max(np.abs(steered.astype(np.float64) - base)))


def count_params(steering: Module, backbone: Module) -> tuple[int, float]:
    """Trainable adapter parameters and their fraction of the backbone size."""
    seen = {id(p): p for _, p in steering.named_parameters() if p.requires_grad}
    n = sum(p.size for p in seen.values())
    return n, n / backbone.num_parameters()

