"""``diamond-bench`` command-line entry point."""

from __future__ import annotations

import argparse
import sys

from .config import ALGORITHMS, ConfigError, ExperimentConfig, load_config
from .runner import DOMAIN_ERRORS, EXIT_CONFIG, EXIT_DOMAIN, EXIT_OK, run_experiment

_OVERRIDES = {
    "inner_steps": "inner_steps",
    "particles": "particles",
    "lam": "lam",
    "seeds": "seeds",
    "map": "map",
    "estimator": "estimator",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diamond-bench", description="Stochastic flow-map alignment benchmarks.")
    p.add_argument("command", choices=ALGORITHMS)
    p.add_argument("figure", nargs="?", choices=["fig2"], help="figure name for the report command")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--inner-steps", dest="inner_steps", type=int)
    p.add_argument("--t-clamp", dest="t_clamp", type=float, help="scheduler t_min")
    p.add_argument("--estimator", choices=["posterior", "weighted", "denoiser", "exact"])
    p.add_argument("--particles", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seeds", type=int)
    p.add_argument("--map", help="'oracle' or a distilled checkpoint path")
    return p


def _merge(raw: dict, args) -> dict:
    raw = dict(raw)
    algo = dict(raw.get("algorithm", {}))
    params = dict(algo.get("params", {}))
    algo["name"] = args.command
    for attr, key in _OVERRIDES.items():
        val = getattr(args, attr)
        if val is not None:
            params[key] = val
    algo["params"] = params
    raw["algorithm"] = algo
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output_dir"] = args.out
    if args.t_clamp is not None:
        raw["scheduler"] = {**raw.get("scheduler", {}), "t_min": args.t_clamp}
    return raw


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = load_config(args.config) if args.config else {}
        cfg = ExperimentConfig.from_dict(_merge(raw, args))
        out = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DOMAIN_ERRORS as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
