"""Command-line entry point: ``slipbag run|histogram|strategies|presets``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .bagsim import MaterialKind
from .config import ConfigError, SimConfig, apply_overrides, flatten_keys
from .harness import (
    BAG_MATERIALS, BUILTIN_EXPERIMENTS, ExperimentConfig, grasp_height_histogram, histogram_csv,
    run_experiment, strategy_csv, strategy_comparison,
)
from .policy import POLICIES
from .slip import CLASSIFIER_PRESETS


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig.builtin(args.experiment or "table1")
    kw = {}
    if args.seed is not None:
        kw["base_seed"] = args.seed
    if args.trials is not None:
        kw["n_trials"] = args.trials
    if getattr(args, "workers", None) is not None:
        kw["workers"] = args.workers
    return replace(cfg, **kw) if kw else cfg


def _overrides(args) -> dict:
    if not args.config:
        return {}
    with open(args.config, encoding="utf-8") as f:
        doc = json.load(f)
    return doc.get("overrides", {}) if isinstance(doc, dict) else {}


def _write(out: str, name: str, text: str) -> str:
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    return path


def cmd_run(args) -> int:
    cfg = _load_config(args)
    result = run_experiment(cfg, out_dir=args.out)
    sys.stdout.write(result.summary.to_text())
    print(f"wrote {len(result.records)} episodes to {args.out}", file=sys.stderr)
    return 0


def cmd_histogram(args) -> int:
    sim = apply_overrides(SimConfig(), _overrides(args))
    heights = [float(h) for h in args.heights.split(",")]
    seed = 0 if args.seed is None else args.seed
    n = args.trials or 10_000
    hists = [grasp_height_histogram(m, heights, n, seed, sim) for m in args.materials.split(",")]
    text = histogram_csv(hists)
    path = _write(args.out, "histogram.csv", text)
    sys.stdout.write(text)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_strategies(args) -> int:
    levels = [float(e) for e in args.errors.split(",")]
    rows = strategy_comparison(levels, runs=args.trials or 1000, seed=args.seed or 0)
    text = strategy_csv(rows)
    path = _write(args.out, "strategies.csv", text)
    sys.stdout.write(text)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_presets(args) -> int:
    doc = {
        "experiments": BUILTIN_EXPERIMENTS,
        "policies": list(POLICIES),
        "materials": [k.value for k in MaterialKind],
        "classifiers": {k: m.confusion.tolist() for k, m in CLASSIFIER_PRESETS.items()},
        "overrides": {k: (v.value if hasattr(v, "value") else v)
                      for k, v in flatten_keys(SimConfig()).items()},
    }
    json.dump(doc, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slipbag", description="Bag singulation and bagging simulator.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", metavar="PATH", help="experiment JSON document")
        p.add_argument("--out", metavar="DIR", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, help="base seed (overrides the config)")
        p.add_argument("--trials", type=int, help="trials per cell (overrides the config)")

    p = sub.add_parser("run", help="run a Monte Carlo experiment")
    common(p, "out")
    p.add_argument("--experiment", choices=sorted(BUILTIN_EXPERIMENTS),
                   help="built-in experiment (ignored with --config)")
    p.add_argument("--workers", type=int, help="worker processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("histogram", help="layer-count distribution per grasp height")
    common(p, "out")
    p.add_argument("--materials", default=",".join(BAG_MATERIALS))
    p.add_argument("--heights", default="1,2,3,4,5,6,7,8,9,10", help="comma-separated mm, ascending")
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("strategies", help="compare height-update strategies")
    common(p, "out")
    p.add_argument("--errors", default="0,0.1,0.2", help="comma-separated classifier error levels")
    p.set_defaults(func=cmd_strategies)

    p = sub.add_parser("presets", help="print built-in experiments and overridable keys")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        # bad material names, unsorted heights and the like
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
