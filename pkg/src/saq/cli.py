"""Command line entry point: ``saq <command> --config <path> [--seed N] [--out DIR] [--override key=value]``.

Exit codes: 0 success, 2 config error, 3 stage failure, 4 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as C
from .runner import Divergence, StageFailure, run

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_DIVERGED = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saq", description="Sampling-aware quantization experiments on toy diffusion models.")
    p.add_argument("command", choices=C.KINDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config key, value parsed as JSON; repeatable")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args) -> C.RunConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={json.dumps(args.out)}")
    cfg = C.load(args.config, overrides)
    with open(args.config) as fh:
        raw = json.load(fh)
    if "kind" in raw and raw["kind"] != args.command:
        raise C.ConfigError(f"config kind {raw['kind']!r} does not match command {args.command!r}")
    cfg.kind = args.command
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        sys.stdout.write(cfg.to_json())
        return EXIT_OK
    try:
        manifest = run(cfg)
    except Divergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except StageFailure as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(f"{cfg.kind}: {manifest.status}; outputs in {cfg.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
