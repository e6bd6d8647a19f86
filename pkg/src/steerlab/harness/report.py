"""Assemble the results document and its derived views (CSV, SVG, markdown)."""

from __future__ import annotations

import csv
import io
import math
from typing import Any

import numpy as np

from ..metrics import MatchedPair, monotonicity_report
from ..errors import ConfigurationError
from .pipeline import Workspace, family_of, rows_to_points, steering_name, summarize_sweep

CSV_COLUMNS = ("adapter", "family", "key", "scale", "seed", "prompt", "s", "m", "eff", "alpha", "clip_i", "clip_t",
               "style_shift", "inv_stab", "struct_dist", "flagged", "backbone_hash", "adapter_hash",
               "extractor_hash")


def clean(obj: Any) -> Any:
    """Recursively replace non-finite floats by None so the JSON stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return clean(obj.item())
    return obj


def _sorted_names(ws: Workspace, sub: str) -> list[str]:
    d = ws.path(sub)
    return sorted(p.stem for p in d.glob("*.json")) if d.exists() else []


def build_results(ws: Workspace) -> dict:
    """The canonical results document; contains no wall-clock quantities."""
    cfg = ws.cfg
    backbone = ws.read_json("backbone.json")
    extractor = ws.read_json("extractor.json")
    adapters = {n: ws.read_json(f"adapters/{n}.json") for n in _sorted_names(ws, "adapters")}
    sweeps = {n: ws.read_json(f"sweeps/{n}.json") for n in _sorted_names(ws, "sweeps")}
    if not sweeps:
        raise ConfigurationError("no sweep results to report; run sweep first")
    rows = [r for n in sorted(sweeps) for r in sweeps[n]["rows"]]
    curves = {n: summarize_sweep(s["rows"]) for n, s in sweeps.items()}
    mono = {}
    for n, s in sweeps.items():
        pts = rows_to_points(s["rows"])
        if len({p.scale for p in pts}) >= 3:
            mono[n] = monotonicity_report(pts).to_json()
    params = [{"name": "backbone", "params": backbone["params"], "fraction": 1.0}]
    params += [{"name": n, "params": a["params"], "fraction": a["fraction"]} for n, a in adapters.items()]
    k_sweep = []
    for k in sorted(set(cfg.sweep.k_grid)):
        n = steering_name(k)
        if n in sweeps and n in adapters:
            k_sweep.append({"k": k, "params": adapters[n]["params"], "fraction": adapters[n]["fraction"],
                            "curve": curves[n], "rho": mono.get(n, {}).get("mean_curve_rho")})
    doc = {
        "config": cfg.flat(),
        "hashes": {"backbone": backbone["hash"], "extractor": extractor["hash"],
                   "adapters": {n: a["hash"] for n, a in adapters.items()}},
        "backbone": backbone,
        "extractor": extractor,
        "adapters": adapters,
        "rows": rows,
        "curves": curves,
        "monotonicity": mono,
        "parameters": params,
        "k_sweep": k_sweep,
    }
    if ws.path("compare.json").exists():
        doc["compare"] = ws.read_json("compare.json")
    return clean(doc)


def results_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in CSV_COLUMNS})
    return buf.getvalue()


# -- figures ---------------------------------------------------------------------------------


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "steerlab"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path) -> None:
    try:
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def plot_tradeoff(curves: dict[str, list[dict]], path) -> None:
    """Style shift against CLIP-I, one polyline per adapter."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name in sorted(curves):
        pts = curves[name]
        ax.plot([p["clip_i"] for p in pts], [p["style_shift"] for p in pts], marker="o", ms=3, label=name)
    ax.set_xlabel("CLIP-I proxy (content preservation)")
    ax.set_ylabel("style-shift proxy")
    ax.invert_xaxis()
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


LABELS = {"style_shift": "style-shift proxy", "clip_i": "CLIP-I proxy", "inv_stab": "Inv-Stab"}


def plot_monotonicity(curves: dict[str, list[dict]], path) -> None:
    plt = _pyplot()
    metrics = ("style_shift", "clip_i", "inv_stab")
    fig, axes = plt.subplots(1, len(metrics), figsize=(10, 3.2))
    for ax, m in zip(axes, metrics):
        for name in sorted(curves):
            if family_of(name) != "steering":
                continue
            pts = curves[name]
            ax.plot([p["scale"] for p in pts], [p[m] for p in pts], marker="o", ms=3, label=name)
        ax.set_xlabel("steering scale s")
        ax.set_title(LABELS[m], fontsize=9)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


# -- markdown ------------------------------------------------------------------------------------


def matched_row(pair: MatchedPair | dict) -> str:
    """One markdown row of a matched-operating-point table."""
    p = pair.to_json() if isinstance(pair, MatchedPair) else pair
    s, b = p["steering"], p["baseline"]
    return (f"| {s['clip_i']:.3f} ({s['label']}) | {b['clip_i']:.3f} ({b['label']}) | {p['abs_delta_clip_i']:.4f} "
            f"| {s['style_shift']:.4f} | {b['style_shift']:.4f} | {p['style_delta']:+.3f} | {p['gain_pct']:+.0f}% |")


def _fmt(v, spec=".4f") -> str:
    return "n/a" if v is None else format(v, spec)


def summary_markdown(doc: dict, timings: dict | None = None) -> str:
    cfg = doc["config"]
    bb = doc["backbone"]
    out = ["# Run summary", ""]
    out.append(f"Seed {cfg['seed']}; image {cfg['unet.image_size']}px; backbone `{bb['hash'][:12]}` trained "
               f"{bb['budget']['steps']} steps (loss {_fmt(bb['train'].get('first_decile_loss'))} -> "
               f"{_fmt(bb['train'].get('last_decile_loss'))}); adapters {cfg['adapter.steps']} steps at batch "
               f"{cfg['adapter.batch']}, lr {cfg['adapter.lr']}.")
    ex = doc["extractor"]
    out.append(f"Feature extractor `{ex['hash'][:12]}`: held-out joint accuracy {ex['accuracy']:.3f} "
               f"(gate {ex['gate']}).")
    rt = bb["roundtrip"]
    out += ["", f"DDIM round-trip at guidance 1, T={rt['steps']}: Inv-Stab mean {rt['inv_stab_mean']:.4f}, "
                f"min {rt['inv_stab_min']:.4f}; single-step algebraic error {rt['single_step_error']:.2e}.", ""]

    out += ["## Trainable parameters", "", "| Configuration | Trainable params | % of UNet |", "|---|---:|---:|"]
    for p in doc["parameters"]:
        label = "UNet (frozen)" if p["name"] == "backbone" else p["name"]
        out.append(f"| {label} | {p['params']:,} | {100 * p['fraction']:.2f}% |")

    cmp = doc.get("compare", {}).get("comparisons", {})
    for base in ("lora", "rslora"):
        if base not in cmp:
            continue
        out += ["", f"## Matched operating points: steering vs {base} (tol {doc['compare']['tol']})", ""]
        pairs = cmp[base]["pairs"]
        if not pairs:
            out.append(f"No matched pairs: {cmp[base]['diagnostic']}")
            continue
        out += ["| CLIP-I-proxy steering | CLIP-I-proxy baseline | abs dCLIP-I | Style steering | Style baseline | dStyle | Gain |",
                "|---|---|---:|---:|---:|---:|---:|"]
        out += [matched_row(p) for p in pairs]

    primary = doc["compare"]["steering"] if "compare" in doc else None
    mono = doc["monotonicity"].get(primary) if primary else None
    if mono:
        out += ["", f"## Monotonicity of {primary}", "",
                "| Seed | rho(s, style-proxy) | rho(s, CLIP-I-proxy) | rho(s, Inv-Stab) | Style viol. | CLIP-I viol. |",
                "|---|---:|---:|---:|---:|---:|"]
        for s in mono["per_seed"]:
            n = s["n_scales"] - 1
            out.append(f"| {s['seed']} | {_fmt(s['rho']['style_shift'], '+.3f')} | {_fmt(s['rho']['clip_i'], '+.3f')} "
                       f"| {_fmt(s['rho']['inv_stab'], '+.3f')} | {s['violations']['style_shift']}/{n} "
                       f"| {s['violations']['clip_i']}/{n} |")
        pv = mono["pvalues"]
        out.append(f"| pooled | {_fmt(mono['pooled_rho']['style_shift'], '+.3f')} "
                   f"| {_fmt(mono['pooled_rho']['clip_i'], '+.3f')} | {_fmt(mono['pooled_rho']['inv_stab'], '+.3f')} "
                   f"| {mono['violations']['style_shift']} | {mono['violations']['clip_i']} |")
        out.append("")
        out.append(f"Permutation p-values of the mean-curve correlations: style {pv['style_shift']:.4f}, "
                   f"CLIP-I-proxy {pv['clip_i']:.4f}, Inv-Stab {pv['inv_stab']:.4f}.")

    out += ["", "## Baselines", "", "| Method | Params | Setting | CLIP-I-proxy | Style-shift-proxy | Inv-Stab |",
            "|---|---:|---|---:|---:|---:|"]
    params = {p["name"]: p["params"] for p in doc["parameters"]}
    for name in sorted(doc["curves"]):
        pts = [p for p in doc["curves"][name] if p["scale"] != 0.0]
        if not pts:
            continue
        best = max(pts, key=lambda p: p["style_shift"])
        out.append(f"| {name} | {params.get(name, 0):,} | strongest ({best['scale']:g}) | {best['clip_i']:.4f} "
                   f"| {best['style_shift']:.4f} | {best['inv_stab']:.4f} |")

    if primary and primary in doc["curves"]:
        out += ["", f"## Per-scale metrics of {primary}", "",
                "| Scale | CLIP-T-proxy | CLIP-I-proxy | Style-shift-proxy | Inv-Stab | Struct. dist |", "|---:|---:|---:|---:|---:|---:|"]
        for p in doc["curves"][primary]:
            out.append(f"| {p['scale']:g} | {p['clip_t']:.4f} | {p['clip_i']:.4f} | {p['style_shift']:.4f} "
                       f"| {p['inv_stab']:.4f} | {p['struct_dist']:.4f} |")

    if doc["k_sweep"]:
        scales = [p["scale"] for p in doc["k_sweep"][0]["curve"]]
        out += ["", "## Code size sweep", "", "| k | Params | % of UNet | " +
                " | ".join(f"style@{s:g}" for s in scales) + " | rho(s, style) |",
                "|---:|---:|---:|" + "---:|" * len(scales) + "---:|"]
        for row in doc["k_sweep"]:
            vals = " | ".join(f"{p['style_shift']:.4f}" for p in row["curve"])
            rho = row["rho"]["style_shift"] if row["rho"] else None
            out.append(f"| {row['k']} | {row['params']:,} | {100 * row['fraction']:.2f}% | {vals} | {_fmt(rho, '+.3f')} |")

    bench = (timings or {}).get("bench")
    if bench:
        out += ["", f"## Sampling time (batch {bench['batch']}, {bench['steps']} steps, guidance {bench['guidance']})",
                "", "| Variant | Median ms | Overhead | Param fraction |", "|---|---:|---:|---:|"]
        for r in bench["table"]:
            out.append(f"| {r['variant']} | {r['median_ms']:.1f} | {r['overhead_pct']:+.1f}% "
                       f"| {100 * r['param_fraction']:.2f}% |")
    return "\n".join(out) + "\n"


def cmd_report(ws: Workspace) -> dict:
    """Write results.json (canonical), results.csv, both SVG figures and summary.md."""
    doc = build_results(ws)
    ws.write_json("results.json", doc)
    ws.write_text("results.csv", results_csv(doc["rows"]))
    plot_tradeoff(doc["curves"], ws.path("tradeoff.svg"))
    plot_monotonicity(doc["curves"], ws.path("monotonicity.svg"))
    timings = ws.read_json("timings.json") if ws.path("timings.json").exists() else None
    ws.write_text("summary.md", summary_markdown(doc, timings))
    return doc


__all__ = ["build_results", "results_csv", "plot_tradeoff", "plot_monotonicity", "summary_markdown",
           "matched_row", "cmd_report", "clean", "CSV_COLUMNS"]
