"""Comparison adapters for a frozen denoiser: LoRA / rsLoRA, an extracted rank-1
feature direction, and a zero-initialised encoder side branch."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, functional as F, no_grad
from .autodiff.nn import Conv2d, Linear, Module, fan_in_normal, zeros
from .errors import ConfigurationError, ContractError
from .unet import BlockDescriptor, ForwardContext, ResBlock, UNet, select_blocks

SCALING_MODES = ("standard", "rank_stabilized")


def lora_scaling(alpha: float, r: int, mode: str) -> float:
    if mode == "standard":
        return alpha / r
    if mode == "rank_stabilized":
        return alpha / math.sqrt(r)
    raise ConfigurationError(f"unknown scaling mode {mode!r}; expected one of {SCALING_MODES}")


def effective_scale(m: float, alpha: float, r: int, mode: str) -> float:
    """``m * alpha / r`` (standard) or ``m * alpha / sqrt(r)`` (rank-stabilised)."""
    return m * lora_scaling(alpha, r, mode)


def solve_multiplier(eff: float, alpha: float, r: int, mode: str) -> float:
    """Multiplier giving effective scale ``eff``."""
    return eff / lora_scaling(alpha, r, mode)


# -- LoRA -------------------------------------------------------------------------


class LoRAConv2d(Module):
    """3x3 conv plus a low-rank update of its flattened ``[O, 9C]`` kernel.

    ``A`` is an ``[r, C, 3, 3]`` kernel (the ``r x 9C`` factor) and ``B`` an
    ``[r, O]`` map applied per pixel, zero at initialisation.
    """

    def __init__(self, base: Conv2d, r: int, scaling: float, rng: np.random.Generator):
        self.base = base
        self.r = r
        self.scaling = scaling
        self.multiplier = 1.0
        self.lora_A = fan_in_normal(rng, (r, base.in_channels, 3, 3), 9 * base.in_channels)
        self.lora_B = zeros((r, base.out_channels))

    def delta_weight(self) -> np.ndarray:
        """Effective kernel update ``m * scaling * B A`` in ``[O, C, 3, 3]`` layout."""
        A = self.lora_A.data.reshape(self.r, -1)
        dw = (self.lora_B.data.T @ A).reshape(self.base.weight.shape)
        return self.multiplier * self.scaling * dw

    def forward(self, x):
        y = self.base(x)
        coef = self.multiplier * self.scaling
        if coef == 0.0:
            return y
        return y + F.linear(F.conv2d(x, self.lora_A), self.lora_B) * coef


class LoRALinear(Module):
    def __init__(self, base: Linear, r: int, scaling: float, rng: np.random.Generator):
        self.base = base
        self.r = r
        self.scaling = scaling
        self.multiplier = 1.0
        self.lora_A = fan_in_normal(rng, (base.in_features, r), base.in_features)
        self.lora_B = zeros((r, base.out_features))

    def delta_weight(self) -> np.ndarray:
        return self.multiplier * self.scaling * (self.lora_A.data @ self.lora_B.data)

    def forward(self, x):
        y = self.base(x)
        coef = self.multiplier * self.scaling
        if coef == 0.0:
            return y
        return y + F.linear(F.linear(x, self.lora_A), self.lora_B) * coef


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 4
    alpha: float = 4.0
    scaling_mode: str = "standard"
    placement: tuple[str, ...] = ("mid", "up")

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigurationError("LoRA rank must be >= 1")
        lora_scaling(self.alpha, self.rank, self.scaling_mode)


class LoRAModel(Module):
    """A structural clone of a backbone whose target layers carry LoRA branches.

    The clone shares every backbone tensor, so the original model is untouched.
    """

    def __init__(self, model: UNet, layers: dict[str, Module], cfg: LoRAConfig):
        self.model = model
        self.cfg = cfg
        self.paths = list(layers)
        self.layers = [layers[p] for p in self.paths]
        self.scaling = lora_scaling(cfg.alpha, cfg.rank, cfg.scaling_mode)

    @property
    def multiplier(self) -> float:
        return self.layers[0].multiplier if self.layers else 0.0

    def with_multiplier(self, m: float) -> "LoRAModel":
        """A view of this adapter at runtime multiplier ``m`` (tensors shared)."""
        clone = self.share_structure()
        for layer in clone.layers:
            layer.multiplier = float(m)
        # keep the wrapped model's references pointing at the re-multiplied layers
        for path, layer in zip(clone.paths, clone.layers):
            clone.model.replace_submodule(path, layer)
        return clone

    def effective_scale(self, m: float | None = None) -> float:
        return effective_scale(self.multiplier if m is None else m, self.cfg.alpha, self.cfg.rank,
                               self.cfg.scaling_mode)

    def lora_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for path, layer in zip(self.paths, self.layers):
            out.append((f"{path}.lora_A", layer.lora_A))
            out.append((f"{path}.lora_B", layer.lora_B))
        return out

    def num_lora_parameters(self) -> int:
        return sum(p.size for _, p in self.lora_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.lora_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.lora_parameters():
            if name not in state:
                raise ConfigurationError(f"LoRA state is missing {name}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigurationError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype)

    def forward(self, x, t, c, adapters=()):
        return self.model.forward(x, t, c, adapters)

    def denoise_fn(self, adapters=()):
        return self.model.denoise_fn(adapters)


def block_module_paths(model: UNet) -> dict[str, str]:
    """Map block ids (``mid.0``) to module paths (``mid.0`` / ``up.3``)."""
    out = {}
    n_down = len(model.down)
    for j, desc in enumerate(model.descriptors):
        if desc.placement == "down":
            out[desc.block_id] = f"down.{j}"
        elif desc.placement == "mid":
            out[desc.block_id] = f"mid.{j - n_down}"
        else:
            out[desc.block_id] = f"up.{j - n_down - len(model.mid)}"
    return out


def lora_targets(model: UNet, placement: Sequence[str]) -> list[str]:
    """Conv and embedding-projection layers of the blocks in ``placement``."""
    paths = block_module_paths(model)
    targets = []
    for desc in select_blocks(model.descriptors, placement):
        base = paths[desc.block_id]
        targets += [f"{base}.conv1", f"{base}.conv2", f"{base}.emb_proj"]
    return targets


def lora_wrap(model: UNet, targets: Sequence[str] | None, cfg: LoRAConfig,
              rng: np.random.Generator) -> LoRAModel:
    """Attach LoRA branches to ``targets`` (default: the placement's blocks)."""
    if targets is None:
        targets = lora_targets(model, cfg.placement)
    scaling = lora_scaling(cfg.alpha, cfg.rank, cfg.scaling_mode)
    clone = model.share_structure()
    layers: dict[str, Module] = {}
    for path in targets:
        try:
            base = clone.get_submodule(path)
        except (AttributeError, IndexError, ValueError):
            raise ConfigurationError(f"unknown layer {path!r}") from None
        if isinstance(base, Conv2d):
            layer = LoRAConv2d(base, cfg.rank, scaling, rng)
        elif isinstance(base, Linear):
            layer = LoRALinear(base, cfg.rank, scaling, rng)
        else:
            raise ConfigurationError(f"layer {path!r} is not a Linear or Conv2d")
        clone.replace_submodule(path, layer)
        layers[path] = layer
    return LoRAModel(clone, layers, cfg)


def lora_param_count(model: UNet, targets: Sequence[str], rank: int) -> int:
    total = 0
    for path in targets:
        mod = model.get_submodule(path)
        if isinstance(mod, Conv2d):
            total += rank * (9 * mod.in_channels + mod.out_channels)
        else:
            total += rank * (mod.in_features + mod.out_features)
    return total


def choose_rank(model: UNet, targets: Sequence[str], budget: int, max_rank: int = 64) -> int:
    """Rank whose parameter count is closest to ``budget``."""
    return min(range(1, max_rank + 1), key=lambda r: (abs(lora_param_count(model, targets, r) - budget), r))


def budget_parity(n_adapter: int, n_steering: int) -> float:
    return abs(n_adapter - n_steering) / n_steering


# -- rank-1 direction ---------------------------------------------------------------


class Rank1Adapter(Module):
    """Fixed unit channel directions; ``delta = alpha * s_l`` at every pixel.

    The directions are extracted, not trained, so the adapter reports zero
    trainable parameters.
    """

    def __init__(self, directions: dict[str, np.ndarray], alpha: float = 1.0):
        self.block_ids = sorted(directions)
        self.directions = {b: np.asarray(directions[b], dtype=np.float32) for b in self.block_ids}
        self.alpha = float(alpha)

    def named_parameters(self, prefix: str = ""):
        for b in self.block_ids:
            yield f"{prefix}{b}", Tensor(self.directions[b])

    def at(self, alpha: float) -> "Rank1Adapter":
        return Rank1Adapter(self.directions, alpha)

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(self.directions)

    def begin(self, ctx: ForwardContext):
        return None if self.alpha == 0.0 else ctx.batch

    def delta(self, block: BlockDescriptor, h: Tensor, state) -> Tensor | None:
        if state is None or block.block_id not in self.directions:
            return None
        s = self.directions[block.block_id]
        if s.shape != (h.shape[-1],):
            raise ContractError(f"rank-1 direction for {block.block_id} has {s.shape[0]} channels, "
                                f"block has {h.shape[-1]}")
        return Tensor(np.broadcast_to(self.alpha * s, h.shape).astype(h.dtype))


def rank1_extract(model: UNet, steering, probe_x: np.ndarray, probe_t: np.ndarray, probe_c: np.ndarray,
                  scale: float = 1.0, batch: int = 32) -> tuple[Rank1Adapter, dict[str, float]]:
    """Average the steering residuals over a probe set into unit channel directions.

    Returns the adapter and, per block, the norm of the mean residual (a natural
    unit for the ``alpha`` grid).
    """
    record: dict[str, list[np.ndarray]] = {}
    adapter = steering.at(scale, skip_when_off=False)
    adapter.record = record
    with no_grad():
        for i in range(0, len(probe_x), batch):
            sl = slice(i, i + batch)
            model.forward(probe_x[sl], probe_t[sl], probe_c[sl], [adapter])
    directions, norms = {}, {}
    for bid in sorted(record):
        deltas = np.concatenate(record[bid]).astype(np.float64)
        mean = deltas.mean(axis=(0, 1, 2))
        n = float(np.linalg.norm(mean))
        if not n > 0.0:
            raise ContractError(f"steering residuals at {bid} are all zero; direction undefined")
        directions[bid] = mean / n
        norms[bid] = n
    return Rank1Adapter(directions), norms


# -- side branch ------------------------------------------------------------------------


class SideBranchAdapter(Module):
    """Trainable copy of the backbone encoder whose features are merged into the
    mid and up blocks through zero-initialised 1x1 projections.

    Up block ``up.L.i`` receives the branch's ``down.L.i`` feature and ``mid.i``
    the branch's ``mid.i`` feature.
    """

    def __init__(self, model: UNet, rng: np.random.Generator):
        cfg = model.cfg
        self.cfg = cfg
        self.multiplier = 1.0
        self.in_conv = _trainable_copy(model.in_conv)
        self.down: list[ResBlock] = [_trainable_copy(b) for b in model.down]
        self.mid: list[ResBlock] = [_trainable_copy(b) for b in model.mid]
        self.source: dict[str, str] = {}
        targets = [d for d in model.descriptors if d.placement in ("mid", "up")]
        self.target_ids = [d.block_id for d in targets]
        self.proj: list[Linear] = []
        for d in targets:
            self.source[d.block_id] = d.block_id if d.placement == "mid" else "down." + d.block_id[3:]
            self.proj.append(Linear(d.channels, d.channels, zero_init=True))
        self._index = {b: i for i, b in enumerate(self.target_ids)}

    def at(self, multiplier: float) -> "SideBranchAdapter":
        clone = self.share_structure()
        clone.multiplier = float(multiplier)
        return clone

    def features(self, x: np.ndarray, emb: Tensor) -> dict[str, Tensor]:
        cfg = self.cfg
        feats: dict[str, Tensor] = {}
        h = self.in_conv(Tensor(x))
        nblk = cfg.blocks_per_level
        for lvl in range(len(cfg.channel_mult)):
            for i in range(nblk):
                h = self.down[lvl * nblk + i](h, emb)
                feats[f"down.{lvl}.{i}"] = h
            if lvl != len(cfg.channel_mult) - 1:
                h = F.avg_pool2(h)
        for i, blk in enumerate(self.mid):
            h = blk(h, emb)
            feats[f"mid.{i}"] = h
        return feats

    def begin(self, ctx: ForwardContext):
        if self.multiplier == 0.0:
            return None
        return self.features(ctx.x, ctx.emb.detach())

    def delta(self, block: BlockDescriptor, h: Tensor, state) -> Tensor | None:
        if state is None or block.block_id not in self._index:
            return None
        feat = state[self.source[block.block_id]]
        if feat.shape != h.shape:
            raise ContractError(f"side-branch feature {feat.shape} does not fit block {block.block_id} {h.shape}")
        return self.proj[self._index[block.block_id]](feat) * self.multiplier


def _trainable_copy(mod: Module) -> Module:
    clone = mod.share_structure()
    for name, p in mod.named_parameters():
        new = Tensor(p.data.copy(), requires_grad=True)
        parent, _, leaf = name.rpartition(".")
        setattr(clone.get_submodule(parent) if parent else clone, leaf, new)
    return clone
