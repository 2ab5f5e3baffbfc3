"""Command line entry point: ``wavestack <subcommand> --config <path> ...``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import KINDS, ConfigError, describe, parse_config
from .runner import run


def _seed_list(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("seeds must be a nonempty list of integers >= 0")
    return seeds


def build_parser():
    parser = argparse.ArgumentParser(prog="wavestack", description="SIM and FIM experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in (*KINDS, "validate-config"):
        p = sub.add_parser(kind)
        p.add_argument("--config", required=kind == "validate-config",
                       help="key = value config file (defaults apply when omitted)")
        if kind != "validate-config":
            p.add_argument("--seeds", type=_seed_list, help="comma-separated seeds, e.g. 0,1,2")
            p.add_argument("--out", help="output directory (default: output_dir from config)")
            p.add_argument("--parallel", type=int, default=1, help="worker processes")
        else:
            p.add_argument("--defaults", action="store_true",
                           help="print documented defaults for the config's kind")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            cfg = parse_config(args.config)
        else:
            from .config import build_config
            cfg = build_config({"kind": args.command})
    except (OSError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate-config":
        print(describe(cfg.kind) if args.defaults else cfg.to_text(), end="")
        return 0
    if cfg.kind != args.command:
        print(f"error: config kind {cfg.kind!r} does not match subcommand {args.command!r}",
              file=sys.stderr)
        return 2
    if args.seeds:
        cfg = cfg.with_overrides(seeds=tuple(args.seeds))
    if args.parallel < 1:
        print("error: --parallel must be >= 1", file=sys.stderr)
        return 2
    out = args.out or cfg["output_dir"]
    record = run(cfg, args.parallel, out)
    for seed, msg in record.failures.items():
        print(f"seed {seed} failed: {msg}", file=sys.stderr)
    print(f"wrote {out}/report.json ({len(record.per_seed)}/{len(record.seeds)} seeds ok)")
    return 0 if record.ok else 1


if __name__ == "__main__":
    sys.exit(main())
