"""``gsp pretrain|tune|sweep|report`` entry point.

Exit codes: 0 ok, 2 config/input error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .backbone import WeightsError
from .graph import DatasetError
from .harness import (ConfigError, cmd_pretrain, cmd_report, cmd_sweep, cmd_tune, load_config,
                      report_text)
from .optim import DivergenceError

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "tune", "sweep", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config; flags override its fields")
        p.add_argument("--out", help="output directory")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories holding report.json")
            continue
        p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        if name != "pretrain":
            p.add_argument("--lambda", dest="lam", type=float)
            p.add_argument("--method")
            p.add_argument("--plots", action="store_true", default=None)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            runs = list(args.runs)
            if args.config:
                runs = load_config(args.config, command="report").runs + runs
            rows = cmd_report(runs, args.out)
            sys.stdout.write(report_text(rows))
            return EXIT_OK
        overrides = {"out": args.out}
        if args.seed is not None:
            overrides["seeds"] = [args.seed]
        if args.command != "pretrain":
            overrides.update({"lambda": args.lam, "method": args.method, "plots": args.plots})
        cfg = load_config(args.config, overrides, command=args.command)
        if args.command == "pretrain" and args.seed is not None:
            cfg.pretrain = {**cfg.pretrain, "seed": args.seed}
        if args.command == "pretrain":
            path = cmd_pretrain(cfg)
            print(f"wrote {path}")
        elif args.command == "tune":
            rep = cmd_tune(cfg)
            print(f"{cfg.method}: accuracy {rep['aggregate']['cell']} over {len(rep['runs'])} seed(s) -> {cfg.out}")
        else:
            rep = cmd_sweep(cfg)
            print(f"{cfg.method}: best lambda {rep['best_lambda']:g}, accuracy {rep['aggregate']['cell']} -> {cfg.out}")
    except DivergenceError as exc:
        print(f"gsp: diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DatasetError, WeightsError, FileNotFoundError) as exc:
        print(f"gsp: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
