"""Procedural content x style image corpus.

Four shape classes are rendered with random placement, size and rotation as an
anti-aliased coverage map; each style is then a deterministic palette or
texture transform of that map. Images are ``[H, W, 3]`` float32 in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import Tensor, functional as F
from .autodiff.nn import Module
from .errors import ConfigurationError

CONTENTS = ("circle", "square", "triangle", "star")
STYLES = ("neutral", "palette_a", "stripes", "sepia", "noir")
SPLITS = ("pretrain", "style_train", "style_ref", "feat_train", "eval")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}

SUPERSAMPLE = 4
BG_LUMA, FG_LUMA = -0.6, 0.6
GRAIN_SIGMA = 0.7


@dataclass(frozen=True)
class PromptSpec:
    content_id: int
    style_id: int

    def __post_init__(self):
        if not 0 <= self.content_id < len(CONTENTS):
            raise IndexError(f"content_id {self.content_id} out of range")
        if not 0 <= self.style_id < len(STYLES):
            raise IndexError(f"style_id {self.style_id} out of range")

    @property
    def text(self) -> str:
        return f"a {CONTENTS[self.content_id]} in {STYLES[self.style_id]} style"


def _polygon_mask(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorised over sample points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < xint)
    return inside


def _shape_vertices(content: str) -> np.ndarray:
    if content == "square":
        a = np.pi / 4 + np.arange(4) * np.pi / 2
        return 1.0 * np.stack([np.cos(a), np.sin(a)], 1)
    if content == "triangle":
        a = -np.pi / 2 + np.arange(3) * 2 * np.pi / 3
        return 1.1 * np.stack([np.cos(a), np.sin(a)], 1)
    if content == "star":
        a = -np.pi / 2 + np.arange(10) * np.pi / 5
        r = np.where(np.arange(10) % 2 == 0, 1.15, 0.45)
        return np.stack([r * np.cos(a), r * np.sin(a)], 1)
    raise ConfigurationError(f"no polygon for {content}")


def coverage(content_id: int, size: int, cx: float, cy: float, radius: float, theta: float) -> np.ndarray:
    """Fraction of each pixel covered by the shape, via supersampling."""
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    ct, st = np.cos(theta), np.sin(theta)
    u, v = ct * dx + st * dy, -st * dx + ct * dy
    name = CONTENTS[content_id]
    if name == "circle":
        inside = u * u + v * v < 1.0
    else:
        inside = _polygon_mask(u, v, _shape_vertices(name))
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def grain_field(rng: np.random.Generator, size: int, amplitude: float, sigma: float = GRAIN_SIGMA) -> np.ndarray:
    """Smooth random luminance texture with standard deviation ``amplitude``."""
    field = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return amplitude * field / field.std()


def apply_style(cov: np.ndarray, style_id: int, grain: np.ndarray | None = None) -> np.ndarray:
    """Deterministic style transform of a coverage map (plus optional luminance
    texture) to an RGB image."""
    size = cov.shape[0]
    luma = BG_LUMA + (FG_LUMA - BG_LUMA) * cov
    if grain is not None:
        luma = luma + grain
    name = STYLES[style_id]
    if name == "neutral":
        rgb = np.repeat(luma[..., None], 3, axis=-1)
    elif name == "palette_a":
        bg = np.array([-0.7, -0.5, 0.35])
        fg = np.array([0.9, 0.35, -0.6])
        rgb = bg + (fg - bg) * cov[..., None]
    elif name == "stripes":
        yy, xx = np.mgrid[0:size, 0:size]
        period = max(size // 4, 2)
        stripe = np.where(((xx + yy) // (period // 2)) % 2 == 0, 0.35, -0.35)
        rgb = np.repeat((luma + stripe)[..., None], 3, axis=-1)
    elif name == "sepia":
        lum01 = (luma + 1.0) / 2.0
        rgb01 = np.stack([0.95 * lum01 + 0.12, 0.78 * lum01 + 0.06, 0.52 * lum01], axis=-1)
        rgb = 2.0 * rgb01 - 1.0
    elif name == "noir":
        yy, xx = np.mgrid[0:size, 0:size]
        r2 = ((xx - size / 2 + 0.5) ** 2 + (yy - size / 2 + 0.5) ** 2) / (size / 2) ** 2
        dark = 1.8 * luma - 0.35 - 0.5 * r2
        rgb = np.repeat(dark[..., None], 3, axis=-1)
    else:  # pragma: no cover - guarded by PromptSpec
        raise ConfigurationError(name)
    return np.clip(rgb, -1.0, 1.0).astype(np.float32)


def render_sample(spec: PromptSpec, rng: np.random.Generator, size: int = 32,
                  grain: float = 0.0) -> np.ndarray:
    """Render one image: random pose of the content shape (plus an optional
    smooth luminance grain), then the style transform."""
    cx = rng.uniform(0.38, 0.62) * size
    cy = rng.uniform(0.38, 0.62) * size
    radius = rng.uniform(0.24, 0.34) * size
    theta = rng.uniform(0.0, 2.0 * np.pi)
    cov = coverage(spec.content_id, size, cx, cy, radius, theta)
    return apply_style(cov, spec.style_id, grain_field(rng, size, grain) if grain else None)


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Independent stream per (corpus seed, split, sample index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(_SPLIT_CODE[split], index))))


@dataclass
class DatasetSplit:
    images: np.ndarray
    content_ids: np.ndarray
    style_ids: np.ndarray
    split_tag: str
    seeds: list[tuple[int, str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def prompts(self) -> list[PromptSpec]:
        return [PromptSpec(int(c), int(s)) for c, s in zip(self.content_ids, self.style_ids)]

    def image_hashes(self) -> set[bytes]:
        return {img.tobytes() for img in self.images}


@dataclass(frozen=True)
class CorpusConfig:
    image_size: int = 32
    target_style: int = 3
    pretrain: int = 2048
    style_train: int = 256
    style_ref: int = 32
    feat_train: int = 4000
    eval: int = 400
    grain: float = 0.0

    def __post_init__(self):
        for name in ("pretrain", "style_train", "style_ref", "feat_train", "eval"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"corpus size {name} must be positive")
        if not 0 < self.target_style < len(STYLES):
            raise ConfigurationError("target_style must be a non-neutral style id")


def _make_split(tag: str, n: int, seed: int, size: int, content_of, style_of, grain: float = 0.0) -> DatasetSplit:
    imgs = np.empty((n, size, size, 3), dtype=np.float32)
    cids = np.empty(n, dtype=np.int64)
    sids = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = sample_rng(seed, tag, i)
        spec = PromptSpec(content_of(i), style_of(i))
        imgs[i] = render_sample(spec, rng, size, grain)
        cids[i], sids[i] = spec.content_id, spec.style_id
    return DatasetSplit(imgs, cids, sids, tag, [(seed, tag, i) for i in range(n)])


def build_corpus(cfg: CorpusConfig, seed: int) -> dict[str, DatasetSplit]:
    """All splits; a pure function of ``(cfg, seed)``."""
    C, S, tgt = len(CONTENTS), len(STYLES), cfg.target_style
    content = lambda i: i % C  # noqa: E731
    style_of = {
        "pretrain": lambda i: 0,
        "style_train": lambda i: tgt,
        "style_ref": lambda i: tgt,
        "feat_train": lambda i: (i // C) % S,
        "eval": lambda i: (i // C) % S,
    }
    return {tag: _make_split(tag, getattr(cfg, tag), seed, cfg.image_size, content, style_of[tag], cfg.grain)
            for tag in SPLITS}


def eval_prompts(n_prompts: int, target_style: int) -> list[PromptSpec]:
    """The evaluation prompt list: contents cycled, all in the target style."""
    return [PromptSpec(i % len(CONTENTS), target_style) for i in range(n_prompts)]


class PromptEncoder(Module):
    """Embedding table over content and style tokens; a prompt pools the two rows."""

    def __init__(self, cond_dim: int, rng: np.random.Generator, init_std: float = 0.1):
        n = len(CONTENTS) + len(STYLES)
        self.table = Tensor((init_std * rng.standard_normal((n, cond_dim))).astype(np.float32),
                            requires_grad=True)

    def forward(self, content_ids, style_ids) -> Tensor:
        ids = np.stack([np.asarray(content_ids), len(CONTENTS) + np.asarray(style_ids)], axis=1)
        return F.embedding(self.table, ids).mean(axis=1)

    def encode(self, specs) -> np.ndarray:
        return np.stack([prompt_embed(s, self.table.data) for s in specs]).astype(np.float32)


def prompt_embed(spec: PromptSpec, table: np.ndarray) -> np.ndarray:
    """Mean of the content-token and style-token embedding rows."""
    table = np.asarray(table)
    sid = len(CONTENTS) + spec.style_id
    if sid >= table.shape[0]:
        raise IndexError("embedding table too small for style id")
    return ((table[spec.content_id] + table[sid]) * 0.5).astype(np.float32)


def export_corpus(splits: dict[str, DatasetSplit], directory, seed: int) -> None:
    """Write each split as an STLB container plus a JSON manifest."""
    import json
    import os

    from .autodiff import checkpoint

    os.makedirs(directory, exist_ok=True)
    manifest = {"seed": seed, "splits": {}}
    for tag, split in splits.items():
        checkpoint.save(os.path.join(directory, f"{tag}.stlb"), {
            "images": split.images,
            "content_ids": split.content_ids.astype(np.float32),
            "style_ids": split.style_ids.astype(np.float32),
        })
        manifest["splits"][tag] = {
            "count": len(split),
            "specs": [[int(c), int(s)] for c, s in zip(split.content_ids, split.style_ids)],
        }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
