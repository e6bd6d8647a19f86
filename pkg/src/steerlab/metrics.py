"""Feature-space evaluation: a small frozen classifier as the image encoder,
cosine metrics, rank statistics and matched operating points.

All metric arithmetic runs in float64.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .autodiff import AdamW, AdamWConfig, Tensor, backward, concat, cross_entropy, functional as F, no_grad
from .autodiff import checkpoint
from .autodiff.nn import Conv2d, Linear, Module
from .data import CONTENTS, STYLES, DatasetSplit
from .errors import AcceptanceGateError, ConfigurationError, ContractError, NumericError

ACCURACY_GATE = 0.9


class FeatureExtractor(Module):
    """Two-stage conv encoder -> ``feat_dim`` features -> content and style heads."""

    def __init__(self, rng: np.random.Generator, feat_dim: int = 64, width: int = 16, groups: int = 4):
        self.groups = groups
        self.feat_dim = feat_dim
        self.conv1 = Conv2d(3, width, rng)
        self.conv2 = Conv2d(width, 2 * width, rng)
        self.conv3 = Conv2d(2 * width, 2 * width, rng)
        self.fc = Linear(4 * width, feat_dim, rng)
        self.content_head = Linear(feat_dim, len(CONTENTS), rng)
        self.style_head = Linear(feat_dim, len(STYLES), rng)
        self.frozen = False

    def embed(self, x) -> Tensor:
        h = F.silu(F.group_norm(self.conv1(x), self.groups))
        h = F.avg_pool2(h)
        h = F.silu(F.group_norm(self.conv2(h), self.groups))
        h = F.avg_pool2(h)
        h = F.silu(self.conv3(h))
        # pool first and second moments so texture energy survives the global average
        mean = h.mean(axis=(1, 2))
        second = (h * h).mean(axis=(1, 2))
        return self.fc(concat([mean, second], axis=-1))

    def forward(self, x):
        f = self.embed(x)
        a = F.silu(f)
        return self.content_head(a), self.style_head(a)

    def features(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """``[N, feat_dim]`` float64 features of ``[N, H, W, 3]`` images."""
        out = []
        with no_grad():
            for i in range(0, len(images), batch):
                out.append(self.embed(np.asarray(images[i:i + batch], dtype=np.float32)).data)
        return np.concatenate(out).astype(np.float64)

    def predict(self, images: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
        cs, ss = [], []
        with no_grad():
            for i in range(0, len(images), batch):
                c, s = self.forward(np.asarray(images[i:i + batch], dtype=np.float32))
                cs.append(c.data.argmax(1))
                ss.append(s.data.argmax(1))
        return np.concatenate(cs), np.concatenate(ss)

    def digest(self) -> str:
        return checkpoint.digest(self.state_dict())


@dataclass
class ExtractorReport:
    accuracy: float
    content_accuracy: float
    style_accuracy: float
    losses: list[float]
    digest: str


def joint_accuracy(fx: FeatureExtractor, split: DatasetSplit) -> tuple[float, float, float]:
    pc, ps = fx.predict(split.images)
    ok_c = pc == split.content_ids
    ok_s = ps == split.style_ids
    return float(np.mean(ok_c & ok_s)), float(np.mean(ok_c)), float(np.mean(ok_s))


def train_feature_extractor(train: DatasetSplit, heldout: DatasetSplit, seed: int, steps: int = 600,
                            batch: int = 32, lr: float = 3e-3, gate: float = ACCURACY_GATE,
                            augment_noise: float = 0.1) -> tuple[FeatureExtractor, ExtractorReport]:
    """Fit on ``train``, freeze, and check joint accuracy on ``heldout`` against ``gate``.

    Inputs are lightly perturbed with Gaussian noise so generated samples, which are
    never pixel-perfect, stay inside the encoder's training distribution.
    """
    if len(train) == 0:
        raise ConfigurationError("feature-extractor training split is empty")
    rng = np.random.default_rng(seed)
    fx = FeatureExtractor(rng)
    opt = AdamW(fx.trainable_parameters(), AdamWConfig(lr=lr, total_steps=steps, weight_decay=1e-4))
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(train), size=batch)
        x = train.images[idx]
        if augment_noise:
            x = x + augment_noise * rng.standard_normal(x.shape).astype(np.float32)
        lc, ls = fx(x)
        loss = cross_entropy(lc, train.content_ids[idx]) + cross_entropy(ls, train.style_ids[idx])
        val = float(loss.data)
        if not math.isfinite(val):
            raise NumericError(f"non-finite feature-extractor loss at step {step}")
        losses.append(val)
        opt.zero_grad()
        backward(loss)
        opt.step()
    fx.freeze()
    fx.frozen = True
    acc, acc_c, acc_s = joint_accuracy(fx, heldout)
    report = ExtractorReport(acc, acc_c, acc_s, losses, fx.digest())
    if acc < gate:
        raise AcceptanceGateError(
            f"feature extractor joint accuracy {acc:.3f} below gate {gate} "
            f"(content {acc_c:.3f}, style {acc_s:.3f}, final loss {losses[-1]:.4f})")
    return fx, report


# -- cosine metrics ---------------------------------------------------------------------


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine of ``[..., d]`` arrays (broadcasting), in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise NumericError("cosine of a zero-norm vector")
    out = np.sum(a * b, axis=-1) / (na * nb)
    # identical rows are exactly 1, not 1 - ulp
    out = np.where(np.all(a == b, axis=-1), 1.0, out)
    return np.clip(out, -1.0, 1.0)


def clip_i(f_steer: np.ndarray, f_base: np.ndarray) -> np.ndarray:
    """Content preservation: cosine between steered and baseline features."""
    return cosine(f_steer, f_base)


def content_prototypes(fx: FeatureExtractor, split: DatasetSplit) -> np.ndarray:
    feats = fx.features(split.images)
    protos = []
    for c in range(len(CONTENTS)):
        mask = split.content_ids == c
        if not mask.any():
            raise ConfigurationError(f"no images of content {CONTENTS[c]!r} for its prototype")
        protos.append(feats[mask].mean(axis=0))
    return np.stack(protos)


def style_prototype(fx: FeatureExtractor, style_ref: DatasetSplit) -> np.ndarray:
    return fx.features(style_ref.images).mean(axis=0)


def clip_t(f_steer: np.ndarray, content_ids, prototypes: np.ndarray) -> np.ndarray:
    """Prompt alignment proxy: cosine to the class-mean feature of the prompt's content."""
    ids = np.asarray(content_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= len(prototypes)):
        raise ConfigurationError("content id without a prototype")
    return cosine(f_steer, prototypes[ids])


def style_shift(f_steer: np.ndarray, f_base: np.ndarray, mu_style: np.ndarray) -> np.ndarray:
    """``max(0, cos(f_steer, mu) - cos(f_base, mu))``."""
    return np.maximum(0.0, cosine(f_steer, mu_style) - cosine(f_base, mu_style))


def struct_dist(f_steer: np.ndarray, f_base: np.ndarray) -> np.ndarray:
    """Euclidean distance between unit-normalised features."""
    a = np.asarray(f_steer, dtype=np.float64)
    b = np.asarray(f_base, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return np.linalg.norm(a - b, axis=-1)


def inv_stab(z_T: np.ndarray, z_hat: np.ndarray) -> np.ndarray:
    """Per-sample cosine between flattened initial latents and their inversions."""
    z_T = np.asarray(z_T)
    z_hat = np.asarray(z_hat)
    if z_T.shape != z_hat.shape:
        raise ContractError(f"latent shapes differ: {z_T.shape} vs {z_hat.shape}")
    n = z_T.shape[0] if z_T.ndim > 1 else 1
    return cosine(z_T.reshape(n, -1), z_hat.reshape(n, -1))


# -- rank statistics ----------------------------------------------------------------------


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties.

    Returns NaN when either input is constant.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"spearman needs equal-length 1-d inputs, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise ContractError("spearman needs at least 3 points")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0.0:
        return float("nan")
    return float(rx @ ry) / den


def spearman_pvalue(xs, ys, n_perm: int = 10_000, seed: int = 0) -> float:
    """Two-sided permutation p-value ``(1 + #{|rho_perm| >= |rho|}) / (1 + n_perm)``."""
    rho = spearman(xs, ys)
    if math.isnan(rho):
        return 1.0
    x = np.asarray(xs, dtype=np.float64)
    ry = rankdata(np.asarray(ys, dtype=np.float64))
    rx = rankdata(x)
    rng = np.random.default_rng(seed)
    perms = np.argsort(rng.random((n_perm, x.size)), axis=1)
    rxc = rx - rx.mean()
    ryp = ry[perms] - ry.mean()
    rhos = (ryp @ rxc) / math.sqrt(float(rxc @ rxc) * float(np.sum((ry - ry.mean()) ** 2)))
    hits = int(np.sum(np.abs(rhos) >= abs(rho) - 1e-12))
    return (1 + hits) / (1 + n_perm)


# -- sweep rows and reports --------------------------------------------------------------------


@dataclass
class TradeoffPoint:
    adapter: str
    scale: float
    prompt: int
    seed: int
    clip_i: float
    clip_t: float
    style_shift: float
    inv_stab: float
    struct_dist: float
    key: str = "scale"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.style_shift < 0:
            raise ContractError("style_shift must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


METRICS = ("style_shift", "clip_i", "inv_stab", "clip_t", "struct_dist")
# style_shift should rise with s; the rest should fall or stay
EXPECTED_DIRECTION = {"style_shift": +1, "clip_i": -1, "inv_stab": -1}


def curve(points: Iterable[TradeoffPoint], metric: str) -> tuple[np.ndarray, np.ndarray]:
    """Scale grid and the prompt-averaged metric, sorted by scale."""
    acc: dict[float, list[float]] = defaultdict(list)
    for p in points:
        acc[p.scale].append(getattr(p, metric))
    scales = np.array(sorted(acc))
    return scales, np.array([float(np.mean(acc[s])) for s in scales])


def adjacent_violations(values: Sequence[float], direction: int) -> int:
    """Adjacent pairs moving against ``direction`` (ties are not violations)."""
    v = np.asarray(values, dtype=np.float64)
    steps = np.diff(v) * direction
    return int(np.sum(steps < 0))


@dataclass
class SeedMonotonicity:
    seed: int
    n_scales: int
    rho: dict[str, float]
    violations: dict[str, int]


@dataclass
class MonotonicityReport:
    per_seed: list[SeedMonotonicity]
    pooled_rho: dict[str, float]
    mean_curve_rho: dict[str, float]
    pvalues: dict[str, float]

    def formatted(self, metric: str) -> str:
        v = sum(s.violations[metric] for s in self.per_seed)
        n = sum(s.n_scales - 1 for s in self.per_seed)
        return f"{v}/{n}"

    def to_json(self) -> dict:
        return {
            "per_seed": [asdict(s) for s in self.per_seed],
            "pooled_rho": self.pooled_rho,
            "mean_curve_rho": self.mean_curve_rho,
            "pvalues": self.pvalues,
            "violations": {m: self.formatted(m) for m in EXPECTED_DIRECTION},
        }


def monotonicity_report(points: Sequence[TradeoffPoint], n_perm: int = 10_000) -> MonotonicityReport:
    """Per-seed Spearman correlations and violation counts on prompt-averaged curves."""
    by_seed: dict[int, list[TradeoffPoint]] = defaultdict(list)
    for p in points:
        by_seed[p.seed].append(p)
    per_seed = []
    for seed in sorted(by_seed):
        pts = by_seed[seed]
        rho, viol = {}, {}
        n = 0
        for metric in EXPECTED_DIRECTION:
            s, v = curve(pts, metric)
            n = len(s)
            if n < 3:
                raise ContractError(f"seed {seed} has only {n} scales; need >= 3")
            rho[metric] = spearman(s, v)
            viol[metric] = adjacent_violations(v, EXPECTED_DIRECTION[metric])
        per_seed.append(SeedMonotonicity(seed, n, rho, viol))
    pooled, mean_rho, pvals = {}, {}, {}
    for metric in EXPECTED_DIRECTION:
        xs = [p.scale for p in points]
        ys = [getattr(p, metric) for p in points]
        pooled[metric] = spearman(xs, ys)
        s, v = curve(points, metric)
        mean_rho[metric] = spearman(s, v)
        pvals[metric] = spearman_pvalue(s, v, n_perm)
    return MonotonicityReport(per_seed, pooled, mean_rho, pvals)


@dataclass(frozen=True)
class OperatingPoint:
    label: str
    clip_i: float
    style_shift: float


@dataclass(frozen=True)
class MatchedPair:
    steering: OperatingPoint
    baseline: OperatingPoint
    abs_delta_clip_i: float
    style_delta: float
    gain_pct: float

    def to_json(self) -> dict:
        return {
            "steering": asdict(self.steering), "baseline": asdict(self.baseline),
            "abs_delta_clip_i": self.abs_delta_clip_i, "style_delta": self.style_delta,
            "gain_pct": self.gain_pct,
        }


@dataclass
class MatchResult:
    pairs: list[MatchedPair]
    diagnostic: str = ""

    def __len__(self) -> int:
        return len(self.pairs)


def matched_operating_points(steer: Sequence[OperatingPoint], base: Sequence[OperatingPoint],
                             tol: float = 0.01) -> MatchResult:
    """Pair each steering point with the baseline point nearest in CLIP-I."""
    if not steer or not base:
        raise ContractError("matched_operating_points needs two nonempty curves")
    pairs, closest = [], math.inf
    for sp in steer:
        bp = min(base, key=lambda b: (abs(sp.clip_i - b.clip_i), b.label))
        d = abs(sp.clip_i - bp.clip_i)
        closest = min(closest, d)
        if d <= tol:
            delta = sp.style_shift - bp.style_shift
            gain = 100.0 * delta / bp.style_shift if bp.style_shift > 0 else (0.0 if delta == 0 else math.inf)
            pairs.append(MatchedPair(sp, bp, d, delta, gain))
    diag = "" if pairs else f"no pair within tol={tol}; closest |dCLIP-I| = {closest:.4g}"
    return MatchResult(pairs, diag)
