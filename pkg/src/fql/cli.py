"""Command-line entry point: ``fql train|evaluate|ablate|analyze|plot``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import numkit as nk
from .analysis import AnalyzeConfig, analyze
from .experiment import ABLATION_KEYS, ablate, evaluate_run, load_config, train

DEFAULT_SWEEPS = {"beta": [0.0, 2.0, 5.0], "hetero_mode": ["critic_select", "augment_all"]}


def parse_sweep(text: str) -> tuple[str, list]:
    """'beta' / 'hetero_mode' use the default values; 'beta=0,1' lists them explicitly."""
    key, _, raw = text.partition("=")
    if key not in ABLATION_KEYS:
        raise ValueError(f"sweep key must be one of {ABLATION_KEYS}")
    if not raw:
        return key, list(DEFAULT_SWEEPS[key])
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not values:
        raise ValueError("empty sweep")
    return key, [float(v) for v in values] if key == "beta" else values


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seeds", type=int, nargs="+", help="seed list, replaces the config's seeds")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fql", description=__doc__)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("train", help="train one agent over several seeds"))

    ev = sub.add_parser("evaluate", help="re-evaluate the final checkpoints of a run")
    ev.add_argument("run_dir", type=Path)
    ev.add_argument("--episodes", type=int)

    ab = sub.add_parser("ablate", help="sweep beta or hetero_mode")
    _common(ab)
    ab.add_argument("--sweep", required=True, help="beta, hetero_mode or key=v1,v2,...")

    an = sub.add_parser("analyze", help="tabular extrapolation-error sweep")
    an.add_argument("--config", type=Path)
    an.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    an.add_argument("--seeds", type=int, nargs="+", help="first value used as the sweep seed")
    an.add_argument("--out", type=Path, required=True)

    pl = sub.add_parser("plot", help="render SVG curves and histograms for a run directory")
    pl.add_argument("run_dir", type=Path)
    pl.add_argument("--bins", type=int, default=50)
    return parser


def _analyze_config(args) -> AnalyzeConfig:
    data = json.loads(args.config.read_text()) if args.config else {}
    for item in args.overrides:
        key, _, raw = item.partition("=")
        if not raw:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            data[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            data[key.strip()] = raw
    if args.seeds:
        data["seed"] = args.seeds[0]
    return AnalyzeConfig.from_dict(data)


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command == "train":
        config = load_config(args.config, args.overrides, args.seeds)
        print(train(config, args.out))
    elif args.command == "evaluate":
        print(json.dumps(evaluate_run(args.run_dir, args.episodes), indent=2, sort_keys=True))
    elif args.command == "ablate":
        config = load_config(args.config, args.overrides, args.seeds)
        key, values = parse_sweep(args.sweep)
        print(ablate(config, key, values, args.out))
    elif args.command == "analyze":
        report = analyze(_analyze_config(args), args.out)
        print(json.dumps({k: v for k, v in report.items() if k != "bounds"}, indent=2, sort_keys=True))
    elif args.command == "plot":
        from .plots import plot_run

        for path in plot_run(args.run_dir, args.bins):
            print(path)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except (ValueError, FileNotFoundError, KeyError, nk.NonFiniteError) as exc:
        print(f"fql: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
