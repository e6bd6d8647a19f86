"""Experiment configuration: nested dataclasses addressed by flat dotted keys.

The file format is one ``section.key = value`` assignment per line, where
``value`` is a Python literal; ``#`` starts a comment. Top-level fields use a
bare key (``seed = 0``).
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any

from ..data import CorpusConfig
from ..diffusion import SamplerConfig
from ..errors import ConfigurationError
from ..steering import SteeringConfig
from ..training import TrainConfig
from ..unet import UNetConfig


@dataclass(frozen=True)
class ScheduleConfig:
    beta_start: float = 0.00085
    beta_end: float = 0.012


@dataclass(frozen=True)
class LoRASection:
    rank: int = 0  # 0 picks the rank whose parameter count best matches steering
    alpha: float = 4.0
    placement: tuple[str, ...] = ("mid", "up")
    max_rank: int = 64
    parity_tol: float = 0.15


@dataclass(frozen=True)
class Rank1Section:
    probes: int = 64


@dataclass(frozen=True)
class ExtractorSection:
    steps: int = 3000
    batch: int = 32
    lr: float = 3e-3
    gate: float = 0.9


@dataclass(frozen=True)
class SweepSection:
    scales: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
    lora_multipliers: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0, 1.5)
    eff_scales: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
    rank1_scales: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
    sidebranch_multipliers: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0, 1.5)
    k_grid: tuple[int, ...] = (4, 8, 16)
    n_prompts: int = 20
    seeds: tuple[int, ...] = (0, 1, 2)
    tol: float = 0.01
    batch: int = 64


@dataclass(frozen=True)
class BenchSection:
    calls: int = 50
    batch: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    steering: SteeringConfig = field(default_factory=SteeringConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(steps=3000, batch=16, lr=2e-3,
                                                                      cond_dropout=0.1))
    adapter: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1000, batch=4, lr=5e-5))
    lora: LoRASection = field(default_factory=LoRASection)
    rank1: Rank1Section = field(default_factory=Rank1Section)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def __post_init__(self):
        sw = self.sweep
        for name in ("scales", "lora_multipliers", "eff_scales", "rank1_scales", "sidebranch_multipliers",
                     "k_grid", "seeds"):
            if not getattr(sw, name):
                raise ConfigurationError(f"sweep.{name} must be nonempty")
        if 0.0 not in sw.scales:
            raise ConfigurationError("sweep.scales must contain 0")
        if sw.n_prompts < 1:
            raise ConfigurationError("sweep.n_prompts must be >= 1")

    def flat(self) -> dict[str, Any]:
        return flatten(self)


# The desk profile keeps the full pipeline within a single-core CPU budget.
DESK_OVERRIDES = {
    "corpus.image_size": 16,
    "unet.image_size": 16,
    "unet.base_channels": 16,
}

PROFILES = {"desk": DESK_OVERRIDES, "full": {}}


def flatten(cfg, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        key = prefix + f.name
        if is_dataclass(val):
            out.update(flatten(val, key + "."))
        else:
            out[key] = list(val) if isinstance(val, tuple) else val
    return out


def _coerce(value: Any, like: Any, key: str) -> Any:
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(like, int) and not isinstance(like, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(like, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(like, tuple):
        if isinstance(value, (str, int, float)):
            value = (value,)
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(like, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Return ``cfg`` with dotted-key overrides applied and every section re-validated."""
    grouped: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if not name:
            top[section] = value
        else:
            grouped.setdefault(section, {})[name] = value
    known = {f.name for f in fields(cfg)}
    changes: dict[str, Any] = {}
    for name, value in top.items():
        if name not in known or is_dataclass(getattr(cfg, name)):
            raise ConfigurationError(f"unknown config key {name!r}")
        changes[name] = _coerce(value, getattr(cfg, name), name)
    for section, kv in grouped.items():
        if section not in known or not is_dataclass(getattr(cfg, section)):
            raise ConfigurationError(f"unknown config section {section!r}")
        sub = getattr(cfg, section)
        sub_fields = {f.name for f in fields(sub)}
        coerced = {}
        for name, value in kv.items():
            if name not in sub_fields:
                raise ConfigurationError(f"unknown config key {section}.{name}")
            coerced[name] = _coerce(value, getattr(sub, name), f"{section}.{name}")
        try:
            changes[section] = replace(sub, **coerced)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid [{section}] settings: {exc}") from exc
    try:
        return replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc


def parse_value(text: str, key: str = "") -> Any:
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        # bare words are accepted as strings
        if text and all(ch.isalnum() or ch in "_-/." for ch in text):
            return text
        raise ConfigurationError(f"cannot parse value for {key!r}: {text!r}") from None


def parse_assignment(line: str) -> tuple[str, Any]:
    if "=" not in line:
        raise ConfigurationError(f"expected 'key = value', got {line!r}")
    key, _, value = line.partition("=")
    key = key.strip()
    if not key:
        raise ConfigurationError(f"missing key in {line!r}")
    return key, parse_value(value, key)


def parse_config_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, value = parse_assignment(line)
        except ConfigurationError as exc:
            raise ConfigurationError(f"line {lineno}: {exc}") from None
        out[key] = value
    return out


def load_config(path: str | None = None, sets: list[str] | tuple[str, ...] = (),
                profile: str = "desk") -> ExperimentConfig:
    """Profile defaults, then the config file, then ``--set`` overrides."""
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    overrides = dict(PROFILES[profile])
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                overrides.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    for item in sets:
        key, value = parse_assignment(item)
        overrides[key] = value
    return apply_overrides(ExperimentConfig(), overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in sorted(cfg.flat().items()))


__all__ = [
    "ExperimentConfig", "ScheduleConfig", "LoRASection", "Rank1Section", "ExtractorSection",
    "SweepSection", "BenchSection", "PROFILES", "apply_overrides", "parse_config_text", "load_config",
    "dump_config", "flatten",
]
