"""A small module system: parameter discovery, freezing and state dicts."""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from ..errors import ConfigurationError
from . import functional as F
from .tensor import Tensor


class Module:
    """Base class. Parameters are the ``Tensor`` attributes of a module and,
    recursively, of its child modules (including lists of modules)."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + name, val
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise ConfigurationError(f"state dict is missing {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigurationError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def get_submodule(self, path: str) -> "Module":
        mod = self
        for part in path.split("."):
            mod = mod[int(part)] if isinstance(mod, (list, tuple)) else getattr(mod, part)
        return mod

    def share_structure(self) -> "Module":
        """Copy the module tree while sharing every parameter tensor."""
        clone = copy.copy(self)
        for name, val in vars(self).items():
            if isinstance(val, Module):
                setattr(clone, name, val.share_structure())
            elif isinstance(val, list) and any(isinstance(v, Module) for v in val):
                setattr(clone, name, [v.share_structure() if isinstance(v, Module) else v for v in val])
        return clone

    def replace_submodule(self, path: str, new: "Module") -> None:
        parent_path, _, leaf = path.rpartition(".")
        parent = self.get_submodule(parent_path) if parent_path else self
        if isinstance(parent, list):
            parent[int(leaf)] = new
        else:
            setattr(parent, leaf, new)


def fan_in_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    w = rng.standard_normal(shape) / np.sqrt(fan_in)
    return Tensor(w.astype(np.float32), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


class Linear(Module):
    """Affine map over the last axis; weight is ``[in, out]``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init or rng is None:
            self.weight = zeros((in_features, out_features))
        else:
            self.weight = fan_in_normal(rng, (in_features, out_features), in_features)
        self.bias = zeros((out_features,)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """3x3, padding-1 convolution on channels-last maps."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        self.in_channels = in_channels
        self.out_channels = out_channels
        shape = (out_channels, in_channels, 3, 3)
        if zero_init or rng is None:
            self.weight = zeros(shape)
        else:
            self.weight = fan_in_normal(rng, shape, 9 * in_channels)
        self.bias = zeros((out_channels,))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias)
