"""Command-line entry point: ``smsaccess <stage|run> --config run.toml``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .errors import SmsAccessError, StageError
from .pipeline import STAGES, run_pipeline, run_stage


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"--set expects key=value, got '{item}'")
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML run configuration")
    common.add_argument("--workers", type=int, default=1, help="parallel workers for kriging and scoring")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="smsaccess", description="Accessibility of shared-mobility feeder services.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run the whole pipeline, or one --stage")
    run.add_argument("--stage", choices=STAGES)
    for stage in STAGES:
        p = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        if stage == "score":
            p.add_argument("--feed", choices=("base", "augmented", "all"), default="all")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = _overrides(args.set)
        if args.out:
            overrides["out_dir"] = args.out
        cfg = load_config(args.config, overrides)
        if args.command == "run" and args.stage is None:
            result = run_pipeline(cfg, args.workers)
        else:
            stage = args.stage if args.command == "run" else args.command
            kwargs = {"feed": args.feed} if stage == "score" and getattr(args, "feed", None) else {}
            result = run_stage(cfg, stage, args.workers, **kwargs)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SmsAccessError, OSError, ValueError, argparse.ArgumentTypeError) as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return 2
    json.dump(result, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
