"""Tiny conditional U-Net with labelled GroupNorm residual blocks.

After every residual block the forward pass offers the block output ``h`` to
each adapter in the active adapter set; any returned tensor is added to ``h``
before it continues downstream (and into the skip stack for down blocks).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .autodiff import Tensor, concat, functional as F
from .autodiff.nn import Conv2d, Linear, Module
from .errors import ConfigurationError, ContractError

PLACEMENTS = ("down", "mid", "up")
MID_BLOCKS = 2


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2)
    blocks_per_level: int = 2
    groups: int = 8
    cond_dim: int = 32
    time_dim: int = 64
    T_train: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(self.channel_mult))
        if not self.channel_mult:
            raise ConfigurationError("channel_mult must be nonempty")
        if self.base_channels % self.groups:
            raise ConfigurationError(
                f"base_channels={self.base_channels} not divisible by groups={self.groups}")
        if self.image_size % (2 ** (len(self.channel_mult) - 1)):
            raise ConfigurationError("image_size must be divisible by the total downsampling factor")
        if self.time_dim % 2:
            raise ConfigurationError("time_dim must be even")


@dataclass(frozen=True)
class BlockDescriptor:
    block_id: str
    placement: str
    channels: int
    level: int

    def to_json(self) -> dict:
        return {"block_id": self.block_id, "placement": self.placement,
                "channels": self.channels, "level": self.level}


def select_blocks(descriptors: Sequence[BlockDescriptor], placement) -> list[BlockDescriptor]:
    wanted = set(placement)
    unknown = wanted - set(PLACEMENTS)
    if unknown:
        raise ConfigurationError(f"unknown placement(s) {sorted(unknown)}")
    return [d for d in descriptors if d.placement in wanted]


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding: component ``2i`` is ``sin(t w_i)``, ``2i+1`` is ``cos(t w_i)``,
    with ``w_i = 10000^(-i / (dim/2))``. Scalar ``t`` gives ``[dim]``, arrays ``[B, dim]``."""
    if dim % 2:
        raise ConfigurationError("embedding dim must be even")
    t_arr = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t_arr[..., None] * freqs
    emb = np.empty(t_arr.shape + (dim,), dtype=np.float64)
    emb[..., 0::2] = np.sin(ang)
    emb[..., 1::2] = np.cos(ang)
    return emb.astype(np.float32)


@dataclass
class ForwardContext:
    """Per-call information handed to adapters before the first block runs."""
    x: np.ndarray
    t: np.ndarray
    t_frac: np.ndarray
    c: Tensor
    emb: Tensor
    model: "UNet"
    batch: int = field(init=False)

    def __post_init__(self):
        self.batch = self.x.shape[0]


class Adapter(Protocol):
    def begin(self, ctx: ForwardContext): ...

    def delta(self, block: BlockDescriptor, h: Tensor, state) -> Tensor | None: ...


class ResBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int, rng: np.random.Generator):
        self.groups = groups
        self.conv1 = Conv2d(in_ch, out_ch, rng)
        self.emb_proj = Linear(emb_dim, out_ch, rng)
        self.conv2 = Conv2d(out_ch, out_ch, zero_init=True)
        self.skip = Linear(in_ch, out_ch, rng) if in_ch != out_ch else None

    def forward(self, x: Tensor, emb_act: Tensor) -> Tensor:
        h = self.conv1(F.silu(F.group_norm(x, self.groups)))
        e = self.emb_proj(emb_act)
        h = h + e.reshape(e.shape[0], 1, 1, e.shape[1])
        h = self.conv2(F.silu(F.group_norm(h, self.groups)))
        base = self.skip(x) if self.skip is not None else x
        return base + h


class UNet(Module):
    """Encoder / mid / decoder denoiser predicting epsilon."""

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        C0, td = cfg.base_channels, cfg.time_dim
        self.time_fc1 = Linear(td, td, rng)
        self.time_fc2 = Linear(td, td, rng)
        self.cond_proj = Linear(cfg.cond_dim, td, rng)
        self.in_conv = Conv2d(cfg.in_channels, C0, rng)

        descs: list[BlockDescriptor] = []
        self.down: list[ResBlock] = []
        skip_ch: list[int] = []
        ch = C0
        for lvl, mult in enumerate(cfg.channel_mult):
            for i in range(cfg.blocks_per_level):
                out = C0 * mult
                self.down.append(ResBlock(ch, out, td, cfg.groups, rng))
                descs.append(BlockDescriptor(f"down.{lvl}.{i}", "down", out, lvl))
                ch = out
                skip_ch.append(ch)
        self.mid: list[ResBlock] = []
        last = len(cfg.channel_mult) - 1
        for i in range(MID_BLOCKS):
            self.mid.append(ResBlock(ch, ch, td, cfg.groups, rng))
            descs.append(BlockDescriptor(f"mid.{i}", "mid", ch, last))
        self.up: list[ResBlock] = []
        for lvl in reversed(range(len(cfg.channel_mult))):
            for i in range(cfg.blocks_per_level):
                out = C0 * cfg.channel_mult[lvl]
                self.up.append(ResBlock(ch + skip_ch.pop(), out, td, cfg.groups, rng))
                descs.append(BlockDescriptor(f"up.{lvl}.{i}", "up", out, lvl))
                ch = out
        self.out_conv = Conv2d(ch, cfg.in_channels, zero_init=True)
        self.descriptors = tuple(descs)
        ids = [d.block_id for d in descs]
        if len(set(ids)) != len(ids):  # pragma: no cover - structural guard
            raise ConfigurationError("duplicate block ids")

    def blocks(self) -> list[tuple[BlockDescriptor, ResBlock]]:
        return list(zip(self.descriptors, self.down + self.mid + self.up))

    def embed(self, t: np.ndarray, c) -> Tensor:
        temb = Tensor(timestep_embedding(t, self.cfg.time_dim))
        e = self.time_fc2(F.silu(self.time_fc1(temb)))
        return F.silu(e + self.cond_proj(c))

    def forward(self, x, t, c, adapters: Sequence[Adapter] = ()) -> Tensor:
        x_arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
        cfg = self.cfg
        if x_arr.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
            raise ContractError(f"input shape {x_arr.shape} does not match config")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x_arr.shape[0],))
        c_t = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float32))
        emb = self.embed(t, c_t)
        ctx = ForwardContext(x_arr, t, t / cfg.T_train, c_t, emb, self)
        states = [(a, a.begin(ctx)) for a in adapters]

        def hook(desc: BlockDescriptor, h: Tensor) -> Tensor:
            for a, st in states:
                d = a.delta(desc, h, st)
                if d is None:
                    continue
                if d.shape != h.shape:
                    raise ContractError(
                        f"adapter delta for block {desc.block_id} has shape {d.shape}, expected {h.shape}")
                h = h + d
            return h

        h = self.in_conv(Tensor(x_arr) if not isinstance(x, Tensor) else x)
        skips = []
        it = iter(self.descriptors)
        nblk = cfg.blocks_per_level
        for lvl in range(len(cfg.channel_mult)):
            for i in range(nblk):
                blk = self.down[lvl * nblk + i]
                h = hook(next(it), blk(h, emb))
                skips.append(h)
            if lvl != len(cfg.channel_mult) - 1:
                h = F.avg_pool2(h)
        for blk in self.mid:
            h = hook(next(it), blk(h, emb))
        for j, lvl in enumerate(reversed(range(len(cfg.channel_mult)))):
            for i in range(nblk):
                blk = self.up[j * nblk + i]
                h = hook(next(it), blk(concat([h, skips.pop()], axis=-1), emb))
            if lvl != 0:
                h = F.upsample2(h)
        return self.out_conv(F.silu(F.group_norm(h, cfg.groups)))

    def denoise_fn(self, adapters: Sequence[Adapter] = ()):
        """Bind an adapter set, returning ``fn(x_t, t, c) -> Tensor``."""
        adapters = tuple(adapters)

        def fn(x, t, c):
            return self.forward(x, t, c, adapters)

        return fn


def build_unet(cfg: UNetConfig, rng: np.random.Generator) -> tuple[UNet, tuple[BlockDescriptor, ...]]:
    model = UNet(cfg, rng)
    return model, model.descriptors
