"""Command-line entry points: ``run``, ``ablate`` and ``evaluate``.

Exit codes: 0 success, 1 other failure, 2 invalid configuration,
3 non-finite training loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config, parse_config_text
from .errors import ConfigError, FedSKDError, NonFiniteLossError
from .runner import (
    ABLATION_AXES,
    evaluate_run,
    new_run_dir,
    output_root,
    run_ablation,
    run_and_persist,
    write_metrics_csv,
)

log = logging.getLogger("fedskd_lab")


def _load(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "workers", None):
        overrides.append(f"workers={args.workers}")
    if args.config:
        return load_config(args.config, overrides)
    return parse_config_text("", overrides)


def cmd_run(args) -> int:
    cfg = _load(args)
    run_dir = run_and_persist(cfg)
    print(run_dir)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out_dir = new_run_dir(cfg.replace(method="fedskd"), output_root(cfg))
    (out_dir / "config.txt").write_text(cfg.to_text())
    path = out_dir / f"ablation_{args.axis}.csv"
    rows = run_ablation(args.axis, cfg, path)
    print(path)
    log.info("%d rows written", len(rows))
    return 0


def cmd_evaluate(args) -> int:
    rows = evaluate_run(args.checkpoint_dir, scope=args.scope)
    if args.output:
        write_metrics_csv(rows, args.output)
    else:
        for row in rows:
            print(json.dumps(row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedskd-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("config", nargs="?", help="key = value config file (defaults when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--workers", type=int, help="parallel client training threads")

    run = sub.add_parser("run", help="run one experiment")
    config_args(run)
    run.set_defaults(func=cmd_run)

    ablate = sub.add_parser("ablate", help="sweep one ablation axis with FedSKD")
    ablate.add_argument("axis", choices=sorted(ABLATION_AXES))
    config_args(ablate)
    ablate.set_defaults(func=cmd_ablate)

    ev = sub.add_parser("evaluate", help="recompute metrics from a run directory's checkpoints")
    ev.add_argument("checkpoint_dir", type=Path)
    ev.add_argument("--scope", choices=("local", "global"))
    ev.add_argument("-o", "--output", type=Path, help="write CSV here instead of printing JSON lines")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except NonFiniteLossError as err:
        print(f"non-finite loss: {err} {json.dumps(err.diagnostics, default=str)}", file=sys.stderr)
        return 3
    except (FileNotFoundError, FedSKDError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
