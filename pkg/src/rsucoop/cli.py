"""Command line entry point: ``rsucoop run`` and ``rsucoop sweep``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .metrics import run_suite, run_sweep, write_sweep
from .scenario import ConfigError, ScenarioConfig, load_config

log = logging.getLogger("rsucoop")


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig().validate()
    if args.sensor:
        cfg = cfg.with_sensor(args.sensor)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    return cfg.validate()


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="scenario YAML file (built-in default scenario when omitted)")
    p.add_argument("--trials", type=int, help="number of trials (default: trial_count from config)")
    p.add_argument("--sensor", type=str.lower, choices=["vlp16", "vlp32c"], help="override every RSU's sensor")
    p.add_argument("--seed", type=int, help="master seed; trial i uses seed + i")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for trials")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsucoop", description="Roadside LiDAR cooperative localization simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a trial suite and write trajectory/bins/summary CSVs")
    _common(run)
    run.add_argument("--delay-ms", type=float, help="channel delay in milliseconds")
    run.add_argument("--loss", type=float, help="packet loss probability")
    run.add_argument("--no-rsu", action="store_true", help="onboard localization only")
    run.add_argument("--no-plot", action="store_true", help="skip error_curve.svg")

    sweep = sub.add_parser("sweep", help="MLE table over delay x loss")
    _common(sweep)
    sweep.add_argument("--delays", type=_floats, default=[0.0, 10.0, 30.0], help="delays in ms, e.g. 0,10,30")
    sweep.add_argument("--losses", type=_floats, default=[0.0, 0.1, 0.2], help="loss probabilities, e.g. 0,0.1,0.2")
    return parser


def _cmd_run(args) -> None:
    cfg = _load(args)
    delay = None if args.delay_ms is None else args.delay_ms / 1000.0
    cfg = cfg.with_channel(delay, args.loss).validate()
    result = run_suite(cfg, args.trials, Path(args.out), jobs=args.jobs, no_rsu=args.no_rsu, plot=not args.no_plot)
    for name, e in result.aggregate.items():
        print(f"{name:>9}: baseline MLE {e['mle_baseline'][0]:.4f} m, fused MLE {e['mle_fused'][0]:.4f} m, "
              f"improvement {100 * e['improvement']:.1f}%")
    print(f"wrote {args.out}/")


def _cmd_sweep(args) -> None:
    cfg = _load(args)
    delays = [d / 1000.0 for d in args.delays]
    for loss in args.losses:
        if not 0 <= loss <= 1:
            raise ConfigError(f"--losses: {loss} is not a probability")
    cells = run_sweep(cfg, delays, args.losses, args.trials, jobs=args.jobs)
    write_sweep(cells, cfg, Path(args.out))
    header = "loss \\ delay " + " ".join(f"{d:>9g}ms" for d in args.delays)
    print(header)
    for loss in args.losses:
        row = [c.mle_fused for c in cells if c.loss == loss]
        print(f"{loss:>12g} " + " ".join(f"{v:>11.4f}" for v in row))
    print(f"wrote {args.out}/")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.trials is not None and args.trials < 1:
            raise ConfigError("--trials: must be >= 1")
        if args.command == "run":
            _cmd_run(args)
        else:
            _cmd_sweep(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
