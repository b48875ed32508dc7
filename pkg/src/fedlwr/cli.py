"""Command-line entry points: ``fedlwr run`` and ``fedlwr compare``."""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, DatasetError
from .experiment import compare, format_compare, load_config, run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlwr",
        description="Deterministic federated-learning simulator with layer-wise "
        "similarity-reweighted aggregation and fairness reporting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the experiment described by a YAML config")
    run_p.add_argument("--config", required=True, help="path to the experiment config")

    cmp_p = sub.add_parser("compare", help="compare two strategies from a summary.csv")
    cmp_p.add_argument("--summary", required=True, help="path to a summary.csv")
    cmp_p.add_argument("--a", required=True, help="first strategy name")
    cmp_p.add_argument("--b", required=True, help="second strategy name")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = load_config(args.config)
            paths = run_experiment(config)
            print(f"wrote {len(paths)} files under {config.output_dir}")
            for path in paths:
                print(f"  {path}")
        else:
            print(format_compare(compare(args.summary, args.a, args.b)))
    except (ConfigError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
