"""Command line entry point: ``oedheat factorize|sweep|reconstruct|variance|all``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oedheat", description="A-optimal sensor placement for heat source inversion")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("factorize", "build and cache the low-rank factor"),
                        ("sweep", "binary designs, lower bounds and random baselines for m0 = 1..m0_max"),
                        ("reconstruct", "MAP reconstructions of the test source"),
                        ("variance", "posterior pointwise variance field"),
                        ("all", "factorize, sweep, reconstruct and variance in sequence")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="YAML config file (defaults are used when omitted)")
        s.add_argument("--seed", type=int, help="override the master seed")
        s.add_argument("--m0", type=int, help="sensor budget for reconstruct/variance")
        s.add_argument("--out", help="output directory (overrides config 'output')")
        s.add_argument("--random-count", type=int, help="random designs per m0 in the sweep")
        s.add_argument("--jobs", type=int, help="worker processes for the sweep")
        if name in ("sweep", "all"):
            s.add_argument("--without-constant", action="store_true",
                           help="report J without the design-independent tr(C0) - tr(C) term")
        if name == "variance":
            s.add_argument("--zero-design", action="store_true", help="emit the prior variance (w = 0)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output"] = args.out
    if args.random_count is not None:
        overrides["sweep"] = {"random_count": args.random_count}
    if args.jobs is not None:
        overrides.setdefault("sweep", {})["jobs"] = args.jobs
    if getattr(args, "without_constant", False):
        overrides.setdefault("sweep", {})["include_constant"] = False
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"oedheat: config: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command in ("factorize", "all"):
            factor, head, hit = pipeline.factorize(cfg)
            print(f"factor: rank {factor.rank}, sigma2 {head['sigma2']:.6g}, "
                  f"{'cache hit' if hit else 'built'} -> {pipeline.out_dir(cfg) / 'factor'}")
        if args.command in ("sweep", "all"):
            rows = pipeline.sweep(cfg)
            print(f"sweep: {len(rows)} rows -> {pipeline.out_dir(cfg) / 'Aoptimalities.csv'}")
        if args.command in ("reconstruct", "all"):
            print(json.dumps(pipeline.reconstruct(cfg, args.m0), indent=1, sort_keys=True))
        if args.command in ("variance", "all"):
            rep = pipeline.variance(cfg, args.m0, zero_design=getattr(args, "zero_design", False))
            print(json.dumps(rep, indent=1, sort_keys=True))
    except pipeline.StageError as exc:
        print(f"oedheat: stage '{exc.stage}' failed: {exc.__cause__}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"oedheat: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
