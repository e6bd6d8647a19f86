"""Command-line entry point.

Output goes to ``--out``, else ``$STEERLAB_OUT``, else ``./runs/default``.
Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 acceptance-gate failure (including an empty matched comparison), 1 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from ..errors import AcceptanceGateError, ConfigurationError, NumericError
from .config import PROFILES, load_config
from .pipeline import (ADAPTER_KINDS, Workspace, cmd_bench, cmd_compare, cmd_pretrain, cmd_selftest, cmd_sweep,
                       cmd_train_adapter, run_all, steering_name)
from .report import cmd_report

OUT_ENV = "STEERLAB_OUT"
EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GATE = 0, 1, 2, 3, 4


def _common_options(sub: bool) -> argparse.ArgumentParser:
    # on subcommands the defaults are suppressed so they never mask a value given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if sub else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="key = value config file")
    common.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--profile", default=d("desk"), choices=sorted(PROFILES),
                        help="base defaults before the config file (default: desk)")
    common.add_argument("--out", default=d(None), help=f"run directory (default: ${OUT_ENV} or ./runs/default)")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    top, common = _common_options(False), _common_options(True)
    p = argparse.ArgumentParser(prog="steerlab", description="Activation steering experiments on a toy diffusion model.",
                                parents=[top])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the backbone and the feature extractor")
    ta = sub.add_parser("train-adapter", parents=[common], help="train or extract one adapter")
    ta.add_argument("kind", choices=ADAPTER_KINDS)
    ta.add_argument("--k", type=int, help="steering code size (default: steering.k)")
    sw = sub.add_parser("sweep", parents=[common], help="evaluate one adapter over its grid")
    sw.add_argument("adapter", help="steering, steering_k<K>, lora, rslora, rank1 or sidebranch")
    sub.add_parser("compare", parents=[common], help="matched operating points against the baselines")
    sub.add_parser("report", parents=[common], help="write results.json, CSV, SVG and summary.md")
    sub.add_parser("bench", parents=[common], help="sampling wall-clock per variant")
    sub.add_parser("selftest", parents=[common], help="equivalence, gradient and round-trip checks")
    run = sub.add_parser("run", parents=[common], help="every stage in order")
    run.add_argument("--no-bench", action="store_true")
    return p


def _out_dir(args) -> str:
    return args.out or os.environ.get(OUT_ENV) or os.path.join("runs", "default")


def dispatch(args) -> int:
    if args.command == "selftest":
        checks = cmd_selftest()
        for name, ok in checks.items():
            print(f"{'PASS' if ok else 'FAIL'} {name}")
        return EXIT_OK if all(checks.values()) else EXIT_GATE
    cfg = load_config(args.config, args.set, args.profile)
    ws = Workspace(_out_dir(args), cfg)
    if args.command == "pretrain":
        doc = cmd_pretrain(ws)
        print(json.dumps({"backbone": doc["backbone"]["hash"], "extractor_accuracy": doc["extractor"]["accuracy"],
                          "inv_stab": doc["backbone"]["roundtrip"]["inv_stab_mean"]}, indent=1))
    elif args.command == "train-adapter":
        doc = cmd_train_adapter(ws, args.kind, args.k)
        print(json.dumps({k: doc[k] for k in ("name", "hash", "params", "fraction")}, indent=1))
    elif args.command == "sweep":
        name = steering_name(cfg.steering.k) if args.adapter == "steering" else args.adapter
        rows = cmd_sweep(ws, name)
        print(f"{len(rows)} rows written to {ws.path('sweeps', name + '.json')}")
    elif args.command == "compare":
        doc = cmd_compare(ws)
        empty = False
        for base, entry in doc["comparisons"].items():
            print(f"{base}: {len(entry['pairs'])} matched pairs {entry['diagnostic']}".rstrip())
            empty |= base in ("lora", "rslora") and not entry["pairs"]
        if "lora" not in doc["comparisons"]:
            print("no LoRA sweep to compare against", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_GATE if empty else EXIT_OK
    elif args.command == "report":
        cmd_report(ws)
        print(f"report written to {ws.root}")
    elif args.command == "bench":
        doc = cmd_bench(ws)
        for row in doc["table"]:
            print(f"{row['variant']:>14}  {row['median_ms']:8.1f} ms  {row['overhead_pct']:+6.1f}%  "
                  f"params {100 * row['param_fraction']:.2f}%")
    elif args.command == "run":
        run_all(ws, bench=not args.no_bench)
        print(f"run complete in {ws.root}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return dispatch(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AcceptanceGateError as exc:
        print(f"acceptance gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
