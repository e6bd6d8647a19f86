"""Experiment stages over a run directory.

Every stage reads what earlier stages wrote (checkpoints and JSON records under
the run directory) and writes its own outputs there, so stages can be run one at
a time from the command line or all at once with :func:`run_all`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import zlib
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from .. import adapters as ad
from ..autodiff import checkpoint, no_grad
from ..data import PromptEncoder, build_corpus, eval_prompts
from ..diffusion import (SamplerConfig, ddim_inverse_step, ddim_invert, ddim_step, make_linear_schedule, q_sample,
                         sample)
from ..errors import ConfigurationError, NumericError
from ..metrics import (FeatureExtractor, OperatingPoint, TradeoffPoint, clip_i, clip_t, content_prototypes,
                       inv_stab, matched_operating_points, struct_dist, style_prototype,
                       style_shift, train_feature_extractor)
from ..steering import SteeringModule, config_from_metadata, count_params, verify_zero_equivalence
from ..training import train_on_style, pretrain_backbone
from ..unet import build_unet
from .config import ExperimentConfig, dump_config

log = logging.getLogger("steerlab")

ADAPTER_KINDS = ("steering", "lora", "rslora", "rank1", "sidebranch")
# grid key recorded on each row, per adapter family
FAMILY_KEY = {"steering": "s", "lora": "m", "rslora": "eff", "rank1": "alpha_mult", "sidebranch": "m"}


def stage_rng(seed: int, tag: str, *extra: int) -> np.random.Generator:
    """Independent stream per (run seed, stage tag, optional indices)."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(tag.encode()), *extra))
    return np.random.Generator(np.random.PCG64(ss))


def stage_seed(seed: int, tag: str) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(tag.encode()),)).generate_state(1)[0])


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def family_of(name: str) -> str:
    return name.split("_k")[0]


def steering_name(k: int) -> str:
    return f"steering_k{k}"


class Workspace:
    """A run directory plus lazily loaded, cached artifacts."""

    def __init__(self, root: str | os.PathLike, cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg
        self._corpus = None
        self._backbone = None
        self._extractor = None
        self._adapters: dict[str, tuple] = {}
        self._base = None

    # -- files --
    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def _ensure_parent(self, p: Path) -> None:
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create directory {p.parent}: {exc}") from exc

    def write_text(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        self._ensure_parent(p)
        try:
            p.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write {p}: {exc}") from exc
        return p

    def write_json(self, rel: str, doc: Any) -> Path:
        return self.write_text(rel, canonical_json(doc))

    def read_json(self, rel: str) -> Any:
        p = self.path(rel)
        if not p.exists():
            raise ConfigurationError(f"missing {p}; run the stage that produces it first")
        return json.loads(p.read_text(encoding="utf-8"))

    def save_records(self, rel: str, records: dict[str, np.ndarray]) -> str:
        p = self.path(rel)
        self._ensure_parent(p)
        return checkpoint.save(p, records)

    def load_records(self, rel: str, what: str) -> tuple[dict[str, np.ndarray], str]:
        p = self.path(rel)
        if not p.exists():
            raise ConfigurationError(f"no {what} checkpoint at {p}")
        blob = p.read_bytes()
        return checkpoint.loads(blob), hashlib.sha256(blob).hexdigest()

    # -- shared inputs --
    @property
    def corpus(self):
        if self._corpus is None:
            self._corpus = build_corpus(self.cfg.corpus, self.cfg.seed)
        return self._corpus

    @property
    def sched(self):
        s = self.cfg.schedule
        return make_linear_schedule(self.cfg.unet.T_train, s.beta_start, s.beta_end)

    @property
    def uncond(self) -> np.ndarray:
        return np.zeros(self.cfg.unet.cond_dim, dtype=np.float32)

    def backbone(self):
        """``(model, encoder, hash)`` of the frozen pretrained backbone."""
        if self._backbone is None:
            records, h = self.load_records("backbone.stlb", "backbone (run pretrain first)")
            model, _ = build_unet(self.cfg.unet, np.random.default_rng(0))
            enc = PromptEncoder(self.cfg.unet.cond_dim, np.random.default_rng(0))
            model.load_state_dict({k: v for k, v in records.items() if not k.startswith("encoder.")})
            enc.load_state_dict({"table": records["encoder.table"]})
            self._backbone = (model.freeze(), enc.freeze(), h)
        return self._backbone

    def extractor(self):
        if self._extractor is None:
            records, h = self.load_records("extractor.stlb", "feature extractor (run pretrain first)")
            fx = FeatureExtractor(np.random.default_rng(0))
            fx.load_state_dict(records)
            fx.freeze()
            corpus = self.corpus
            self._extractor = (fx, h, content_prototypes(fx, corpus["feat_train"]),
                               style_prototype(fx, corpus["style_ref"]))
        return self._extractor

    def adapter(self, name: str):
        """``(object, record, hash)`` for a trained adapter checkpoint."""
        if name not in self._adapters:
            records, h = self.load_records(f"adapters/{name}.stlb", f"adapter {name!r} (run train-adapter first)")
            meta = self.read_json(f"adapters/{name}.json")
            model, _, _ = self.backbone()
            self._adapters[name] = (_restore_adapter(family_of(name), records, model, self.cfg), meta, h)
        return self._adapters[name]

    # -- evaluation set --
    def eval_set(self):
        """Prompt specs, conditions and initial latents for every (seed, prompt) pair."""
        cfg = self.cfg
        _, enc, _ = self.backbone()
        prompts = eval_prompts(cfg.sweep.n_prompts, cfg.corpus.target_style)
        pairs = [(seed, p) for seed in cfg.sweep.seeds for p in range(len(prompts))]
        specs = [prompts[p] for _, p in pairs]
        c = enc.encode(specs)
        shape = (cfg.unet.image_size, cfg.unet.image_size, cfg.unet.in_channels)
        z = np.stack([stage_rng(cfg.seed, "latent", seed, p).standard_normal(shape) for seed, p in pairs])
        return pairs, specs, c, z.astype(np.float32)


def _restore_adapter(family: str, records: dict[str, np.ndarray], model, cfg: ExperimentConfig):
    if family == "steering":
        meta = {k: v for k, v in records.items() if k.startswith("meta.")}
        scfg = config_from_metadata(meta)
        steer = SteeringModule(scfg, model.descriptors, cfg.unet.cond_dim, cfg.unet.groups,
                               np.random.default_rng(0))
        steer.load_state_dict({k: v for k, v in records.items() if not k.startswith("meta.")})
        return steer.freeze()
    if family in ("lora", "rslora"):
        lcfg = ad.LoRAConfig(rank=int(records["meta.rank"][0]), alpha=float(records["meta.alpha"][0]),
                             scaling_mode=ad.SCALING_MODES[int(records["meta.mode"][0])],
                             placement=cfg.lora.placement)
        lm = ad.lora_wrap(model, None, lcfg, np.random.default_rng(0))
        lm.load_state_dict(records)
        for _, p in lm.lora_parameters():
            p.requires_grad = False
        return lm
    if family == "rank1":
        dirs = {k: v for k, v in records.items() if not k.startswith("meta.")}
        r1 = ad.Rank1Adapter(dirs)
        r1.alpha_unit = float(records["meta.alpha_unit"][0])
        return r1
    if family == "sidebranch":
        sb = ad.SideBranchAdapter(model, np.random.default_rng(0))
        sb.load_state_dict(records)
        return sb.freeze()
    raise ConfigurationError(f"unknown adapter family {family!r}")


def _probe_batch(ws: Workspace, n: int = 8):
    """A fixed noisy batch from the style split for equivalence checks."""
    split = ws.corpus["style_train"]
    _, enc, _ = ws.backbone()
    rng = stage_rng(ws.cfg.seed, "probe")
    x0 = split.images[:n]
    t = rng.integers(1, ws.sched.T_train + 1, size=len(x0))
    x = q_sample(x0, t, rng.standard_normal(x0.shape).astype(np.float32), ws.sched)
    return x, t, enc.encode(split.prompts[:n])


def _max_diff(a, b) -> float:
    a = a.data if hasattr(a, "data") else a
    b = b.data if hasattr(b, "data") else b
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


# -- pretrain ------------------------------------------------------------------------------


def save_sample_grid(path: Path, images: np.ndarray, cols: int = 5) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    imgs = (np.clip(images, -1.0, 1.0) + 1.0) / 2.0
    n, h, w, c = imgs.shape
    rows = -(-n // cols)
    grid = np.ones((rows * (h + 1) + 1, cols * (w + 1) + 1, c), dtype=np.float32)
    for i, img in enumerate(imgs):
        r, q = divmod(i, cols)
        grid[1 + r * (h + 1):1 + r * (h + 1) + h, 1 + q * (w + 1):1 + q * (w + 1) + w] = img
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, grid, metadata={"Software": None})


def roundtrip_check(ws: Workspace) -> dict:
    """Sample at guidance 1, invert, and compare latents; plus single-step algebra."""
    cfg = ws.cfg
    model, enc, _ = ws.backbone()
    sampler = replace(cfg.sampler, guidance_scale=1.0)
    prompts = eval_prompts(cfg.sweep.n_prompts, cfg.corpus.target_style)
    c = enc.encode(prompts)
    shape = (len(prompts), cfg.unet.image_size, cfg.unet.image_size, cfg.unet.in_channels)
    z = stage_rng(cfg.seed, "roundtrip").standard_normal(shape).astype(np.float32)
    x, _ = sample(model.forward, c, sampler, z, ws.sched)
    zh = ddim_invert(model.forward, x, c, sampler, ws.sched)
    stab = inv_stab(z, zh)
    rng = stage_rng(cfg.seed, "roundtrip-step")
    x_t = rng.standard_normal(shape[1:]).astype(np.float32)[None]
    eps = rng.standard_normal(x_t.shape).astype(np.float32)
    step_err = _max_diff(ddim_inverse_step(ddim_step(x_t, eps, 500, 466, ws.sched), eps, 466, 500, ws.sched), x_t)
    return {"steps": sampler.steps, "guidance": 1.0, "inversion_iters": sampler.inversion_iters,
            "n_prompts": len(prompts), "inv_stab_mean": float(stab.mean()), "inv_stab_min": float(stab.min()),
            "single_step_error": step_err}


def cmd_pretrain(ws: Workspace) -> dict:
    """Train the backbone and the feature extractor; persist both with hashes."""
    cfg = ws.cfg
    corpus = ws.corpus
    rng = stage_rng(cfg.seed, "pretrain")
    model, _ = build_unet(cfg.unet, rng)
    enc = PromptEncoder(cfg.unet.cond_dim, rng)
    t0 = time.perf_counter()
    tlog = pretrain_backbone(model, enc, corpus["pretrain"], ws.sched, cfg.pretrain, rng)
    train_s = time.perf_counter() - t0
    records = model.state_dict()
    records["encoder.table"] = enc.table.data
    h = ws.save_records("backbone.stlb", records)
    ws._backbone = None
    model, enc, _ = ws.backbone()

    # visual sanity grid at the sweep guidance
    prompts = eval_prompts(10, cfg.corpus.target_style)[:4] + eval_prompts(4, 0)
    shape = (len(prompts), cfg.unet.image_size, cfg.unet.image_size, cfg.unet.in_channels)
    z = stage_rng(cfg.seed, "grid").standard_normal(shape).astype(np.float32)
    x, _ = sample(model.forward, enc.encode(prompts), cfg.sampler, z, ws.sched, uncond=ws.uncond)
    x = np.clip(x, -1.0, 1.0)
    save_sample_grid(ws.path("samples.png"), x, cols=4)

    first, last = tlog.decile_means() if tlog.losses else (float("nan"),) * 2
    doc = {
        "hash": h,
        "params": model.num_parameters(),
        "budget": {"steps": cfg.pretrain.steps, "batch": cfg.pretrain.batch, "lr": cfg.pretrain.lr,
                   "cond_dropout": cfg.pretrain.cond_dropout},
        "train": tlog.summary(),
        "loss_decreased": bool(last < first),
        "sample_range": [float(x.min()), float(x.max())],
        "roundtrip": roundtrip_check(ws),
    }
    ws.write_json("backbone.json", doc)
    ex = cmd_extractor(ws)
    ws.write_text("config.txt", dump_config(cfg))
    _record_timing(ws, "pretrain", {"train_s": train_s})
    log.info("backbone %s: loss %.4f -> %.4f, inv-stab %.4f", h[:12], first, last,
             doc["roundtrip"]["inv_stab_mean"])
    return {"backbone": doc, "extractor": ex}


def cmd_extractor(ws: Workspace) -> dict:
    cfg = ws.cfg
    e = cfg.extractor
    corpus = ws.corpus
    fx, rep = train_feature_extractor(corpus["feat_train"], corpus["eval"], stage_seed(cfg.seed, "extractor"),
                                      steps=e.steps, batch=e.batch, lr=e.lr, gate=e.gate)
    h = ws.save_records("extractor.stlb", fx.state_dict())
    ws._extractor = None
    doc = {"hash": h, "accuracy": rep.accuracy, "content_accuracy": rep.content_accuracy,
           "style_accuracy": rep.style_accuracy, "gate": e.gate, "steps": e.steps,
           "final_loss": rep.losses[-1] if rep.losses else None}
    ws.write_json("extractor.json", doc)
    return doc


# -- adapters ---------------------------------------------------------------------------------


def steering_budget(ws: Workspace, k: int | None = None) -> int:
    """Trainable parameter count of the steering module at ``k`` (default: configured k)."""
    cfg = ws.cfg
    model, _, _ = ws.backbone()
    scfg = replace(cfg.steering, k=k or cfg.steering.k)
    probe = SteeringModule(scfg, model.descriptors, cfg.unet.cond_dim, cfg.unet.groups, np.random.default_rng(0))
    return count_params(probe, model)[0]


def cmd_train_adapter(ws: Workspace, kind: str, k: int | None = None) -> dict:
    """Train (or extract) one adapter against the frozen backbone and persist it."""
    if kind not in ADAPTER_KINDS:
        raise ConfigurationError(f"unknown adapter kind {kind!r}; choose from {ADAPTER_KINDS}")
    cfg = ws.cfg
    model, enc, bb_hash = ws.backbone()
    split = ws.corpus["style_train"]
    cond = enc.encode(split.prompts)
    px, pt, pc = _probe_batch(ws)
    with no_grad():
        base_out = model.forward(px, pt, pc).data
    t0 = time.perf_counter()
    doc: dict[str, Any] = {"kind": kind, "backbone_hash": bb_hash,
                           "budget": {"steps": cfg.adapter.steps, "batch": cfg.adapter.batch, "lr": cfg.adapter.lr}}
    tlog = None

    if kind == "steering":
        k = k or cfg.steering.k
        name = steering_name(k)
        rng = stage_rng(cfg.seed, "steering", k)
        steer = SteeringModule(replace(cfg.steering, k=k), model.descriptors, cfg.unet.cond_dim,
                               cfg.unet.groups, rng)
        train_view = steer.at(1.0)
        tlog = train_on_style(model.denoise_fn([train_view]), steer.trainable_parameters(), split, cond,
                              ws.sched, cfg.adapter, rng)
        n, frac = count_params(steer, model)
        steer.freeze()
        records = {**steer.state_dict(), **steer.metadata()}
        doc.update(k=k, params=n, fraction=frac, off_residual=verify_zero_equivalence(model, steer, px, pt, pc, 0.0))
    elif kind in ("lora", "rslora"):
        name = kind
        rng = stage_rng(cfg.seed, kind)
        targets = ad.lora_targets(model, cfg.lora.placement)
        n_steer = steering_budget(ws)
        rank = cfg.lora.rank or ad.choose_rank(model, targets, n_steer, cfg.lora.max_rank)
        mode = "standard" if kind == "lora" else "rank_stabilized"
        lcfg = ad.LoRAConfig(rank, cfg.lora.alpha, mode, cfg.lora.placement)
        lm = ad.lora_wrap(model, targets, lcfg, rng)
        tlog = train_on_style(lm.forward, lm.lora_parameters(), split, cond, ws.sched, cfg.adapter, rng)
        with no_grad():
            off = _max_diff(lm.with_multiplier(0.0).forward(px, pt, pc), base_out)
        n = lm.num_lora_parameters()
        records = {**lm.state_dict(),
                   "meta.rank": np.array([rank], np.float32), "meta.alpha": np.array([lcfg.alpha], np.float32),
                   "meta.mode": np.array([ad.SCALING_MODES.index(mode)], np.float32)}
        parity = ad.budget_parity(n, n_steer)
        doc.update(rank=rank, alpha=lcfg.alpha, scaling_mode=mode, scaling=lm.scaling, params=n,
                   fraction=n / model.num_parameters(), steering_params=n_steer, parity=parity,
                   parity_ok=bool(parity <= cfg.lora.parity_tol), off_residual=off)
    elif kind == "rank1":
        name = "rank1"
        k = cfg.steering.k
        steer, _, steer_hash = ws.adapter(steering_name(k))
        rng = stage_rng(cfg.seed, "rank1")
        n = min(cfg.rank1.probes, len(split))
        t = rng.integers(1, ws.sched.T_train + 1, size=n)
        x_t = q_sample(split.images[:n], t, rng.standard_normal(split.images[:n].shape).astype(np.float32), ws.sched)
        r1, norms = ad.rank1_extract(model, steer, x_t, t, cond[:n])
        unit = float(np.mean(list(norms.values())))
        records = {**r1.state_dict(), "meta.alpha_unit": np.array([unit], np.float32)}
        with no_grad():
            off = _max_diff(model.forward(px, pt, pc, [r1.at(0.0)]), base_out)
        doc.update(source=steering_name(k), source_hash=steer_hash, probes=n, params=0, fraction=0.0,
                   alpha_unit=unit, block_norms=norms, off_residual=off)
        doc.pop("budget")
    else:
        name = "sidebranch"
        rng = stage_rng(cfg.seed, "sidebranch")
        sb = ad.SideBranchAdapter(model, rng)
        with no_grad():
            off = _max_diff(model.forward(px, pt, pc, [sb]), base_out)
        params = sb.trainable_parameters()
        tlog = train_on_style(model.denoise_fn([sb]), params, split, cond, ws.sched, cfg.adapter, rng)
        n = sum(p.size for _, p in params)
        sb.freeze()
        records = sb.state_dict()
        doc.update(params=n, fraction=n / model.num_parameters(), off_residual=off)

    doc["name"] = name
    if tlog is not None:
        doc["train"] = tlog.summary()
    doc["hash"] = ws.save_records(f"adapters/{name}.stlb", records)
    ws.write_json(f"adapters/{name}.json", doc)
    ws._adapters.pop(name, None)
    _record_timing(ws, f"train_{name}", {"train_s": time.perf_counter() - t0})
    log.info("adapter %s: %s params, hash %s", name, doc.get("params"), doc["hash"][:12])
    return doc


# -- sweeps -------------------------------------------------------------------------------------


def family_grid(cfg: ExperimentConfig, family: str) -> tuple[float, ...]:
    sw = cfg.sweep
    return {"steering": sw.scales, "lora": sw.lora_multipliers, "rslora": sw.eff_scales,
            "rank1": sw.rank1_scales, "sidebranch": sw.sidebranch_multipliers}[family]


def bind(ws: Workspace, name: str, value: float):
    """Denoiser for adapter ``name`` at grid value ``value``, plus row annotations."""
    model, _, _ = ws.backbone()
    obj, meta, _ = ws.adapter(name)
    family = family_of(name)
    if family == "steering":
        return model.denoise_fn([obj.at(value)]), {"s": value}
    if family in ("lora", "rslora"):
        if family == "rslora":
            m = ad.solve_multiplier(value, obj.cfg.alpha, obj.cfg.rank, obj.cfg.scaling_mode)
        else:
            m = value
        return obj.with_multiplier(m).forward, {"m": m, "eff": obj.effective_scale(m)}
    if family == "rank1":
        alpha = value * obj.alpha_unit
        return model.denoise_fn([obj.at(alpha)]), {"alpha": alpha, "alpha_mult": value}
    return model.denoise_fn([obj.at(value)]), {"m": value}


def _sample_chunked(ws: Workspace, denoise, c: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Sample in fixed chunks so every family sees the same batch composition."""
    bs = ws.cfg.sweep.batch
    out = [sample(denoise, c[i:i + bs], ws.cfg.sampler, z[i:i + bs], ws.sched, uncond=ws.uncond)[0]
           for i in range(0, len(z), bs)]
    return np.concatenate(out)


def _invert_chunked(ws: Workspace, x: np.ndarray, c: np.ndarray) -> np.ndarray:
    model, _, _ = ws.backbone()
    inv = replace(ws.cfg.sampler, guidance_scale=1.0)
    bs = ws.cfg.sweep.batch
    return np.concatenate([ddim_invert(model.forward, x[i:i + bs], c[i:i + bs], inv, ws.sched)
                           for i in range(0, len(x), bs)])


def base_samples(ws: Workspace):
    """Frozen-backbone samples for the evaluation set, cached in the run directory."""
    if ws._base is not None:
        return ws._base
    _, _, bb_hash = ws.backbone()
    pairs, specs, c, z = ws.eval_set()
    rel = "sweeps/base.stlb"
    p = ws.path(rel)
    cached = None
    if p.exists():
        rec = checkpoint.load(p)
        if rec.get("meta.backbone") is not None and bytes(rec["meta.backbone"].astype(np.uint8)) == bb_hash.encode() \
                and rec["x"].shape == z.shape:
            cached = rec
    if cached is None:
        model, _, _ = ws.backbone()
        x = _sample_chunked(ws, model.forward, c, z)
        zh = _invert_chunked(ws, x, c)
        cached = {"x": x, "z_hat": zh, "meta.backbone": np.frombuffer(bb_hash.encode(), np.uint8).astype(np.float32)}
        ws.save_records(rel, cached)
    fx, _, _, _ = ws.extractor()
    feats = fx.features(np.clip(cached["x"], -1.0, 1.0))
    ws._base = (cached["x"], cached["z_hat"], feats)
    return ws._base


def _row_metrics(f_s, f_b, content_ids, protos, mu, z, zh) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """All metrics per row; rows whose metrics fail numerically are flagged, not fatal."""
    n = len(f_s)
    names = ("clip_i", "clip_t", "style_shift", "inv_stab", "struct_dist")
    out = {m: np.full(n, np.nan) for m in names}
    flagged = np.zeros(n, dtype=bool)
    for i in range(n):
        try:
            vals = {
                "clip_i": clip_i(f_s[i], f_b[i]),
                "clip_t": clip_t(f_s[i:i + 1], content_ids[i:i + 1], protos)[0],
                "style_shift": style_shift(f_s[i], f_b[i], mu),
                "inv_stab": inv_stab(z[i:i + 1], zh[i:i + 1])[0],
                "struct_dist": struct_dist(f_s[i], f_b[i]),
            }
            if not all(np.isfinite(v) for v in vals.values()):
                raise NumericError("non-finite metric")
        except NumericError:
            flagged[i] = True
            continue
        for m, v in vals.items():
            out[m][i] = float(v)
    return out, flagged


def cmd_sweep(ws: Workspace, name: str) -> list[dict]:
    """Sample every (seed, prompt) at every grid value of one adapter; write its rows."""
    cfg = ws.cfg
    family = family_of(name)
    if family not in ADAPTER_KINDS:
        raise ConfigurationError(f"unknown adapter {name!r}")
    _, _, bb_hash = ws.backbone()
    _, meta, ad_hash = ws.adapter(name)
    fx, fx_hash, protos, mu = ws.extractor()
    pairs, specs, c, z = ws.eval_set()
    content_ids = np.array([s.content_id for s in specs])
    x_base, zh_base, f_base = base_samples(ws)
    rows = []
    t0 = time.perf_counter()
    for value in family_grid(cfg, family):
        denoise, extra = bind(ws, name, float(value))
        try:
            x = _sample_chunked(ws, denoise, c, z)
            if np.array_equal(x, x_base):
                zh, f_s = zh_base, f_base
            else:
                zh = _invert_chunked(ws, x, c)
                f_s = fx.features(np.clip(x, -1.0, 1.0))
            mets, flagged = _row_metrics(f_s, f_base, content_ids, protos, mu, z, zh)
        except NumericError as exc:
            log.warning("%s at %s: sampling failed (%s); rows flagged", name, value, exc)
            mets = {m: np.full(len(pairs), np.nan) for m in ("clip_i", "clip_t", "style_shift", "inv_stab",
                                                               "struct_dist")}
            flagged = np.ones(len(pairs), dtype=bool)
        for i, (seed, prompt) in enumerate(pairs):
            row = {"adapter": name, "family": family, "key": FAMILY_KEY[family], "scale": float(value),
                   "seed": int(seed), "prompt": int(prompt), "prompt_text": specs[i].text,
                   "backbone_hash": bb_hash, "adapter_hash": ad_hash, "extractor_hash": fx_hash,
                   "flagged": bool(flagged[i])}
            row.update({k: float(v) for k, v in extra.items()})
            for m, arr in mets.items():
                row[m] = None if flagged[i] else float(arr[i])
            rows.append(row)
        log.info("%s %s=%g: style %.4f clip-i %.4f inv %.4f", name, FAMILY_KEY[family], value,
                 np.nanmean(mets["style_shift"]), np.nanmean(mets["clip_i"]), np.nanmean(mets["inv_stab"]))
    rows.sort(key=lambda r: (r["scale"], r["seed"], r["prompt"]))
    ws.write_json(f"sweeps/{name}.json", {"adapter": name, "grid": [float(v) for v in family_grid(cfg, family)],
                                          "rows": rows})
    _record_timing(ws, f"sweep_{name}", {"sweep_s": time.perf_counter() - t0})
    return rows


def rows_to_points(rows: list[dict]) -> list[TradeoffPoint]:
    pts = []
    for r in rows:
        if r["flagged"]:
            continue
        extra = {k: r[k] for k in ("s", "m", "eff", "alpha", "alpha_mult") if k in r}
        pts.append(TradeoffPoint(r["adapter"], r["scale"], r["prompt"], r["seed"], r["clip_i"], r["clip_t"],
                                 r["style_shift"], r["inv_stab"], r["struct_dist"], r["key"], extra))
    return pts


# -- comparisons ---------------------------------------------------------------------------------


def operating_points(rows: list[dict], include_zero: bool = False) -> list[OperatingPoint]:
    """Prompt- and seed-averaged (CLIP-I, style shift) per grid value."""
    acc: dict[float, list[dict]] = {}
    for r in rows:
        if not r["flagged"]:
            acc.setdefault(r["scale"], []).append(r)
    out = []
    for v in sorted(acc):
        if v == 0.0 and not include_zero:
            continue
        rs = acc[v]
        out.append(OperatingPoint(f"{rs[0]['key']}={v:g}", float(np.mean([r["clip_i"] for r in rs])),
                                  float(np.mean([r["style_shift"] for r in rs]))))
    return out


def summarize_sweep(rows: list[dict]) -> list[dict]:
    acc: dict[float, list[dict]] = {}
    for r in rows:
        if not r["flagged"]:
            acc.setdefault(r["scale"], []).append(r)
    out = []
    for v in sorted(acc):
        rs = acc[v]
        d = {"scale": v, "n": len(rs)}
        for m in ("clip_i", "clip_t", "style_shift", "inv_stab", "struct_dist"):
            d[m] = float(np.mean([r[m] for r in rs]))
        for k in ("m", "eff", "alpha"):
            if k in rs[0]:
                d[k] = rs[0][k]
        out.append(d)
    return out


def cmd_compare(ws: Workspace) -> dict:
    """Matched operating points of the primary steering sweep against each baseline."""
    cfg = ws.cfg
    primary = steering_name(cfg.steering.k)
    steer_rows = ws.read_json(f"sweeps/{primary}.json")["rows"]
    steer_pts = operating_points(steer_rows)
    doc: dict[str, Any] = {"steering": primary, "tol": cfg.sweep.tol, "comparisons": {}}
    for base in ("lora", "rslora", "rank1", "sidebranch"):
        p = ws.path(f"sweeps/{base}.json")
        if not p.exists():
            continue
        meta = ws.read_json(f"adapters/{base}.json")
        entry: dict[str, Any] = {"params": meta["params"]}
        if base in ("lora", "rslora"):
            entry["parity"] = meta["parity"]
            if not meta["parity_ok"]:
                entry.update(pairs=[], diagnostic=f"budget parity {meta['parity']:.3f} exceeds "
                                                  f"{cfg.lora.parity_tol}; no matched comparison emitted")
                doc["comparisons"][base] = entry
                continue
        res = matched_operating_points(steer_pts, operating_points(ws.read_json(f"sweeps/{base}.json")["rows"]),
                                       cfg.sweep.tol)
        entry.update(pairs=[pp.to_json() for pp in res.pairs], diagnostic=res.diagnostic)
        doc["comparisons"][base] = entry
    ws.write_json("compare.json", doc)
    return doc


# -- bench -------------------------------------------------------------------------------------------


def cmd_bench(ws: Workspace) -> dict:
    """Median wall-clock per sampling call, variants interleaved to share drift."""
    cfg = ws.cfg
    model, enc, _ = ws.backbone()
    variants = {"base": model.forward}
    primary = steering_name(cfg.steering.k)
    fracs = {"base": 0.0}
    for label, name, value in (("steering_s0", primary, 0.0), ("steering_s1", primary, 1.0),
                               ("lora_m1", "lora", 1.0), ("sidebranch_m1", "sidebranch", 1.0)):
        if ws.path(f"adapters/{name}.stlb").exists():
            variants[label] = bind(ws, name, value)[0]
            fracs[label] = ws.adapter(name)[1]["fraction"]
    b = cfg.bench.batch
    prompts = eval_prompts(b, cfg.corpus.target_style)
    c = enc.encode(prompts)
    z = stage_rng(cfg.seed, "bench").standard_normal((b, cfg.unet.image_size, cfg.unet.image_size,
                                                      cfg.unet.in_channels)).astype(np.float32)
    times: dict[str, list[float]] = {k: [] for k in variants}
    for fn in variants.values():  # warm-up
        sample(fn, c, cfg.sampler, z, ws.sched, uncond=ws.uncond)
    for _ in range(cfg.bench.calls):
        for label, fn in variants.items():
            t0 = time.perf_counter()
            sample(fn, c, cfg.sampler, z, ws.sched, uncond=ws.uncond)
            times[label].append(time.perf_counter() - t0)
    base_ms = 1e3 * float(np.median(times["base"]))
    table = []
    for label in variants:
        med = 1e3 * float(np.median(times[label]))
        table.append({"variant": label, "median_ms": med, "overhead_pct": 100.0 * (med - base_ms) / base_ms,
                      "param_fraction": fracs[label], "calls": len(times[label])})
    doc = {"batch": b, "steps": cfg.sampler.steps, "guidance": cfg.sampler.guidance_scale, "table": table}
    _record_timing(ws, "bench", doc)
    return doc


def _record_timing(ws: Workspace, key: str, value: Any) -> None:
    p = ws.path("timings.json")
    doc = json.loads(p.read_text()) if p.exists() else {}
    doc[key] = value
    ws.write_json("timings.json", doc)


# -- selftest -----------------------------------------------------------------------------------------


def cmd_selftest(seed: int = 0) -> dict:
    """Zero-scale equivalence, gradient and round-trip checks on a tiny random model."""
    from ..unet import UNetConfig
    from ..steering import SteeringConfig

    rng = np.random.default_rng(seed)
    ucfg = UNetConfig(image_size=8, base_channels=8, groups=4, cond_dim=8, time_dim=16)
    model, desc = build_unet(ucfg, rng)
    # the output layer starts at zero; give it weights so the samples depend on the features
    model.out_conv.weight.data = 0.1 * rng.standard_normal(model.out_conv.weight.shape).astype(np.float32)
    model.freeze()
    steer = SteeringModule(SteeringConfig(k=4), desc, ucfg.cond_dim, ucfg.groups, rng)
    sched = make_linear_schedule(1000)
    sampler = SamplerConfig(steps=5, guidance_scale=3.0)
    z = rng.standard_normal((2, 8, 8, 3)).astype(np.float32)
    c = rng.standard_normal((2, ucfg.cond_dim)).astype(np.float32)
    uncond = np.zeros(ucfg.cond_dim, np.float32)
    base, _ = sample(model.forward, c, sampler, z, sched, uncond=uncond)
    checks = {}
    zero_init, _ = sample(model.denoise_fn([steer.at(1.0, skip_when_off=False)]), c, sampler, z, sched, uncond=uncond)
    checks["e0_zero_init"] = _max_diff(zero_init, base) == 0.0
    for p in steer.proj:
        p.gamma.weight.data = rng.standard_normal(p.gamma.weight.shape).astype(np.float32)
        p.beta.bias.data = rng.standard_normal(p.beta.bias.shape).astype(np.float32)
    off, _ = sample(model.denoise_fn([steer.at(0.0, skip_when_off=False)]), c, sampler, z, sched, uncond=uncond)
    on, _ = sample(model.denoise_fn([steer.at(1.0)]), c, sampler, z, sched, uncond=uncond)
    checks["e0_trained_s0"] = _max_diff(off, base) == 0.0
    checks["steering_active"] = _max_diff(on, base) > 0.0

    checks["gradient_conv_groupnorm"] = _gradient_probe(rng) < 1e-3

    x_t = rng.standard_normal((1, 8, 8, 3))
    eps = rng.standard_normal(x_t.shape)
    back = ddim_inverse_step(ddim_step(x_t, eps, 700, 500, sched), eps, 500, 700, sched)
    checks["roundtrip_step"] = _max_diff(back, x_t) < 1e-5
    blob = checkpoint.dumps(model.state_dict())
    checks["checkpoint_roundtrip"] = checkpoint.dumps(checkpoint.loads(blob)) == blob
    return checks


def _gradient_probe(rng: np.random.Generator, n_probes: int = 20) -> float:
    """Worst relative error of the tape gradient of a conv + group-norm loss on random probes."""
    from ..autodiff import Tensor, backward, functional as F
    from ..autodiff.gradcheck import finite_difference_oracle

    x = rng.standard_normal((1, 4, 4, 4))
    w = rng.standard_normal((4, 4, 3, 3))

    def loss(xt, wt):
        return (F.silu(F.group_norm(F.conv2d(xt, wt), 2)) * F.conv2d(xt, wt)).sum()

    def f(xs):
        return float(loss(Tensor(xs[0]), Tensor(xs[1])).data)

    xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
    backward(loss(xt, wt))
    probes = [(int(i), int(rng.integers(0, (x, w)[i].size))) for i in rng.integers(0, 2, size=n_probes)]
    fd = finite_difference_oracle(f, [x, w], h=1e-4, probes=probes)
    worst = 0.0
    for i, j in probes:
        an = float(np.asarray((xt.grad, wt.grad)[i]).reshape(-1)[j])
        num = float(fd[i].reshape(-1)[j])
        worst = max(worst, abs(an - num) / max(abs(an), abs(num), 1e-6))
    return worst


# -- everything ----------------------------------------------------------------------------------------


def run_all(ws: Workspace, bench: bool = True) -> dict:
    cfg = ws.cfg
    from .report import cmd_report

    cmd_pretrain(ws)
    ks = sorted(set(cfg.sweep.k_grid) | {cfg.steering.k})
    for k in ks:
        cmd_train_adapter(ws, "steering", k)
    for kind in ("lora", "rslora", "rank1", "sidebranch"):
        cmd_train_adapter(ws, kind)
    for k in ks:
        cmd_sweep(ws, steering_name(k))
    for kind in ("lora", "rslora", "rank1", "sidebranch"):
        cmd_sweep(ws, kind)
    cmp = cmd_compare(ws)
    if bench:
        cmd_bench(ws)
    return cmd_report(ws) | {"compare": cmp}


__all__ = [
    "Workspace", "ADAPTER_KINDS", "stage_rng", "stage_seed", "canonical_json", "cmd_pretrain", "cmd_extractor",
    "cmd_train_adapter", "cmd_sweep", "cmd_compare", "cmd_bench", "cmd_selftest", "run_all", "roundtrip_check",
    "operating_points", "summarize_sweep", "rows_to_points", "steering_name", "family_of", "bind",
]
