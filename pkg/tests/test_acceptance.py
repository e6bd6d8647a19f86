"""Acceptance gate: one PASS/FAIL line per criterion, listed in the terminal summary.

The pipeline-level criteria read a full desk-profile run. It is produced on first
use in ``$STEERLAB_ACCEPT_DIR`` (default ``runs/acceptance``) and reused while
its recorded configuration matches the current defaults.
"""

import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import MINI_CFG, record_criterion, run_cli
from gradutil import max_rel_error, module_probe_pairs, probe_pairs
from steerlab.adapters import SideBranchAdapter, effective_scale, lora_scaling
from steerlab.autodiff import Tensor, mse_loss, no_grad
from steerlab.diffusion import ddim_inverse_step, ddim_invert, ddim_step, sample
from steerlab.data import eval_prompts
from steerlab.harness import load_config
from steerlab.harness.config import dump_config
from steerlab.harness.pipeline import Workspace, stage_rng
from steerlab.metrics import inv_stab, matched_operating_points, spearman
from steerlab.steering import SteeringModule, count_params
from test_autodiff import OPS
from test_metrics import LORA, STEER, brute_force_spearman

ROOT = Path(__file__).resolve().parent.parent
SCALES = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)


@pytest.fixture(scope="module")
def desk():
    out = Path(os.environ.get("STEERLAB_ACCEPT_DIR", ROOT / "runs" / "acceptance"))
    cfg = load_config()
    fresh = (out / "results.json").exists() and (out / "config.txt").exists() \
        and (out / "config.txt").read_text() == dump_config(cfg)
    if not fresh:
        assert run_cli("run", "--out", out) == 0
    ws = Workspace(out, cfg)
    ws.results = json.loads((out / "results.json").read_text())
    return ws


def probe_set(ws, n=4):
    _, _, c, z = ws.eval_set()
    return c[:n], z[:n]


def trajectory(ws, adapters, c, z, fn=None):
    model, _, _ = ws.backbone()
    with no_grad():
        x, _ = sample(fn or model.denoise_fn(adapters), c, ws.cfg.sampler, z, ws.sched, uncond=ws.uncond)
    return x


def test_criterion_01_zero_scale_equivalence(desk):
    model, _, _ = desk.backbone()
    c, z = probe_set(desk)
    base = trajectory(desk, [], c, z)
    fresh = SteeringModule(desk.cfg.steering, model.descriptors, desk.cfg.unet.cond_dim, desk.cfg.unet.groups,
                           np.random.default_rng(1))
    trained, _, _ = desk.adapter("steering_k16")
    diffs = {f"zero-init s={s}": np.max(np.abs(trajectory(desk, [fresh.at(s, skip_when_off=False)], c, z) - base))
             for s in (0.5, 1.0, 1.5)}
    diffs["trained s=0"] = np.max(np.abs(trajectory(desk, [trained.at(0.0, skip_when_off=False)], c, z) - base))
    active = np.max(np.abs(trajectory(desk, [trained.at(1.0)], c, z) - base))
    ok = all(d == 0.0 for d in diffs.values())
    record_criterion(1, ok, "zero-scale equivalence",
                     ", ".join(f"{k} max|diff|={v:.1e}" for k, v in diffs.items()) + f"; trained s=1 {active:.2e}")
    assert ok


def test_criterion_02_baseline_off_switches(desk):
    model, _, _ = desk.backbone()
    c, z = probe_set(desk)
    base = trajectory(desk, [], c, z)
    lora, _, _ = desk.adapter("lora")
    rank1, _, _ = desk.adapter("rank1")
    sb = SideBranchAdapter(model, np.random.default_rng(3))
    diffs = {
        "lora m=0": np.max(np.abs(trajectory(desk, [], c, z, fn=lora.with_multiplier(0.0).forward) - base)),
        "rank1 alpha=0": np.max(np.abs(trajectory(desk, [rank1.at(0.0)], c, z) - base)),
        "fresh side-branch": np.max(np.abs(trajectory(desk, [sb], c, z) - base)),
    }
    ok = all(d == 0.0 for d in diffs.values())
    record_criterion(2, ok, "baseline off-switch parity", ", ".join(f"{k} {v:.1e}" for k, v in diffs.items()))
    assert ok


def test_criterion_03_gradients(desk):
    worst = {}
    for name, (fn, arrays) in sorted(OPS.items()):
        pairs = probe_pairs(fn, arrays, n_probes=24)
        worst[name] = max_rel_error(pairs)
    # composed steering-training loss on the desk backbone, at float64 (a private workspace so the
    # converted copies never leak into other tests)
    ws = Workspace(desk.root, desk.cfg)
    model, enc, _ = ws.backbone()
    model.astype(np.float64)
    st, _, _ = ws.adapter("steering_k16")
    st.astype(np.float64)
    rng = stage_rng(0, "accept-grad")
    x0 = ws.corpus["style_train"].images[:2].astype(np.float64)
    t = np.array([150, 420])
    eps = rng.standard_normal(x0.shape)
    ab = ws.sched.alpha_bar(t).reshape(-1, 1, 1, 1)
    x_t = Tensor(np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps)
    cond = Tensor(enc.encode(ws.corpus["style_train"].prompts[:2]).astype(np.float64))
    view = st.at(1.0)
    params = list(st.named_parameters())  # restored adapters come back frozen
    for _, p in params:
        p.requires_grad = True

    def loss():
        return mse_loss(model.forward(x_t, t, cond, [view]), eps)

    pairs = module_probe_pairs(params, loss, n_probes=24, seed=0)
    worst["steering training loss"] = max_rel_error(pairs)
    ok = all(v < 1e-3 for v in worst.values())
    top = max(worst, key=worst.get)
    record_criterion(3, ok, "gradient correctness",
                     f"{len(OPS)} ops + composed loss, 24 probes each, worst {worst[top]:.1e} ({top})")
    assert ok


def test_criterion_04_ddim_round_trip(desk):
    cfg = desk.cfg
    model, enc, _ = desk.backbone()
    sampler = replace(cfg.sampler, guidance_scale=1.0, steps=30)
    c = enc.encode(eval_prompts(20, cfg.corpus.target_style))
    z = stage_rng(cfg.seed, "accept-roundtrip").standard_normal((20, cfg.unet.image_size, cfg.unet.image_size,
                                                                   3)).astype(np.float32)
    with no_grad():
        x, _ = sample(model.forward, c, sampler, z, desk.sched)
        zh = ddim_invert(model.forward, x, c, sampler, desk.sched)
    stab = inv_stab(z, zh)
    rng = stage_rng(cfg.seed, "accept-step")
    x_t = rng.standard_normal((4, cfg.unet.image_size, cfg.unet.image_size, 3)).astype(np.float32)
    e = rng.standard_normal(x_t.shape).astype(np.float32)
    step_err = float(np.max(np.abs(ddim_inverse_step(ddim_step(x_t, e, 500, 466, desk.sched), e, 466, 500,
                                                     desk.sched) - x_t)))
    ok = stab.mean() >= 0.99 and step_err < 1e-5
    record_criterion(4, ok, "DDIM round trip",
                     f"Inv-Stab mean {stab.mean():.4f} (min {stab.min():.4f}, need >= 0.99) over 20 prompts, "
                     f"T=30, iters={sampler.inversion_iters}; single-step error {step_err:.1e}")
    assert ok


def steering_mono(desk):
    return desk.results["monotonicity"]["steering_k16"]


def test_criterion_05_monotone_control_surface(desk):
    rows = [r for r in desk.results["rows"] if r["adapter"] == "steering_k16"]
    grid = sorted({r["scale"] for r in rows})
    n_pairs = {r["seed"] for r in rows}
    per_seed = steering_mono(desk)["per_seed"]
    parts, ok = [], grid == list(SCALES) and len(n_pairs) >= 3
    for s in per_seed:
        rs, rc = s["rho"]["style_shift"], s["rho"]["clip_i"]
        vs, vc = s["violations"]["style_shift"], s["violations"]["clip_i"]
        ok &= rs >= 0.9 and rc <= -0.9 and vs <= 1 and vc <= 1
        parts.append(f"seed {s['seed']}: rho_style {rs:+.3f} rho_clip {rc:+.3f} violations {vs} and {vc} of {s['n_scales'] - 1}")
    n_eval = len({r["prompt"] for r in rows})
    ok &= n_eval >= 20
    record_criterion(5, ok, "monotone control surface", f"{n_eval} prompts x {len(n_pairs)} seeds; " + "; ".join(parts))
    assert ok


def test_criterion_06_inversion_coupling(desk):
    per_seed = steering_mono(desk)["per_seed"]
    rhos = [s["rho"]["inv_stab"] for s in per_seed]
    pooled = steering_mono(desk)["mean_curve_rho"]["inv_stab"]
    ok = all(r <= -0.8 for r in rhos) and pooled <= -0.8
    record_criterion(6, ok, "intervention-magnitude coupling",
                     "rho(s, inv-stab) per seed " + ", ".join(f"{r:+.3f}" for r in rhos) + f"; mean curve {pooled:+.3f}")
    assert ok


def test_criterion_07_matched_operating_points(desk):
    fx = matched_operating_points(STEER, LORA, tol=0.01)
    cols = ([round(p.abs_delta_clip_i, 3) for p in fx.pairs[:2]] + [round(fx.pairs[2].abs_delta_clip_i, 4)],
            [round(p.gain_pct) for p in fx.pairs])
    fixture_ok = cols == ([0.003, 0.001, 0.0096], [33, 41, 80])
    comps = desk.results["compare"]["comparisons"]
    n_live = len(comps["lora"]["pairs"])
    ok = fixture_ok and n_live >= 2
    record_criterion(7, ok, "matched operating points",
                     f"fixture |d| {cols[0]} gains {cols[1]}; live LoRA pairs {n_live} "
                     f"(rsLoRA {len(comps['rslora']['pairs'])}) at tol 0.01 {comps['lora']['diagnostic']}".rstrip())
    assert ok


def test_criterion_08_spearman_oracle():
    rng = np.random.default_rng(2024)
    worst, n = 0.0, 0
    while n < 100:
        size = int(rng.integers(3, 51))
        xs = rng.integers(0, 6, size).astype(float)
        ys = np.round(rng.standard_normal(size), 1)
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            continue
        worst = max(worst, abs(spearman(xs, ys) - brute_force_spearman(xs, ys)))
        n += 1
    ok = worst <= 1e-12 and spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)
    record_criterion(8, ok, "Spearman oracle", f"100 tied vectors, worst |diff| {worst:.1e}")
    assert ok


def test_criterion_09_rslora_scaling(desk):
    exact = (lora_scaling(4, 4, "standard"), lora_scaling(4, 4, "rank_stabilized"),
             effective_scale(1, 4, 4, "standard"), effective_scale(1, 4, 4, "rank_stabilized"))
    rows = [r for r in desk.results["rows"] if r["adapter"] == "rslora"]
    effs = sorted({r["eff"] for r in rows})
    ok = exact == (1.0, 2.0, 1.0, 2.0) and {r["key"] for r in rows} == {"eff"} and {1.25, 1.5} <= set(effs)
    record_criterion(9, ok, "rsLoRA scaling", f"alpha/r, alpha/sqrt(r) at r=4 alpha=4: {exact[2]} vs {exact[3]}; "
                                              f"eff grid {effs}")
    assert ok


def test_criterion_10_parameter_accounting(desk):
    model, _, _ = desk.backbone()
    # a restored adapter is frozen, so count a freshly built one of the same configuration
    st = SteeringModule(desk.cfg.steering, model.descriptors, desk.cfg.unet.cond_dim, desk.cfg.unet.groups,
                        np.random.default_rng(0))
    n, frac = count_params(st, model)
    recorded = desk.results["adapters"]["steering_k16"]["params"]
    k, cond = desk.cfg.steering.k, desk.cfg.unet.cond_dim
    hidden = desk.cfg.steering.hidden_mult * k
    hand = cond * hidden + hidden + hidden * k + k + sum(2 * (k * b.channels + b.channels) for b in st.blocks)
    lora = desk.results["adapters"]["lora"]
    matched_emitted = bool(desk.results["compare"]["comparisons"]["lora"]["pairs"])
    ok = n == hand == recorded and frac < 0.05 and lora["parity"] <= 0.15 and (lora["parity_ok"] or not matched_emitted)
    record_criterion(10, ok, "parameter accounting",
                     f"steering k=16 {n} params ({100 * frac:.2f}% of {model.num_parameters()}); "
                     f"LoRA r={lora['rank']} {lora['params']} params, parity {100 * lora['parity']:.1f}%")
    assert ok


def test_criterion_11_determinism_and_provenance(desk, tmp_path):
    # full pipeline twice on the small configuration, then provenance on the desk run
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("run", "--no-bench", "--config", MINI_CFG, "--out", a) == 0
    assert run_cli("run", "--no-bench", "--config", MINI_CFG, "--out", b) == 0
    same = (a / "results.json").read_bytes() == (b / "results.json").read_bytes()
    hashes = desk.results["hashes"]
    rows = desk.results["rows"]
    traced = all(r["backbone_hash"] == hashes["backbone"] and r["extractor_hash"] == hashes["extractor"]
                 and r["adapter_hash"] == hashes["adapters"][r["adapter"]] for r in rows)
    ok = same and traced
    record_criterion(11, ok, "determinism and provenance",
                     f"two full runs byte-identical: {same}; {len(rows)} desk rows carry all three hashes: {traced}")
    assert ok


def test_criterion_12_k_sweep(desk):
    ks = desk.results["k_sweep"]
    got = [e["k"] for e in ks]
    ok = got == [4, 8, 16] and all(len(e["curve"]) == len(SCALES) for e in ks)
    summary = (desk.root / "summary.md").read_text()
    ok &= "code size" in summary.lower()
    detail = "; ".join(f"k={e['k']} {e['params']} params, style@1.5 {e['curve'][-1]['style_shift']:.4f}" for e in ks)
    record_criterion(12, ok, "k-sweep harness", detail)
    assert ok
