"""Command-line entry point: one subcommand per experiment kind.

Exit codes: 0 when every declared tolerance passes, 1 on a failed check or a
module error, 2 on a configuration error (including an unknown kind).
"""

from __future__ import annotations

import argparse
import sys

from .config import KINDS, load_config
from .core import ConfigurationError
from .harness import run_experiment


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="symbranch", description="Symbiotic branching experiments")
    sub = ap.add_subparsers(dest="kind", metavar="KIND")
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run the {kind} experiment")
        sp.add_argument("--config", metavar="PATH", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        sp.add_argument("--replicas", type=int, help="override the replica count")
        sp.add_argument("--quiet", action="store_true", help="print nothing on success")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    return ap


def _overrides(args):
    kw = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        kw[k.lower()] = v
    for k in ("seed", "out", "replicas"):
        v = getattr(args, k)
        if v is not None:
            kw[k] = v
    return kw


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse reports unknown subcommands with status 2
        return int(exc.code or 0)
    if args.kind is None:
        ap.print_usage(sys.stderr)
        return 2
    try:
        kw = _overrides(args)
        cfg = load_config(args.config, **kw) if args.config else load_config(None, kind=args.kind, **kw)
        if cfg.kind != args.kind:
            raise ConfigurationError(f"config kind {cfg.kind!r} does not match subcommand {args.kind!r}")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    rep = run_experiment(cfg)
    if not args.quiet or not rep.passed:
        for c in rep.checks:
            print(c.line())
        if rep.error:
            print(f"error: {rep.error}", file=sys.stderr)
        print(f"{cfg.kind}: {'PASS' if rep.passed else 'FAIL'} ({rep.wall_time:.1f} s, "
              f"config {cfg.hash[:12]}, out {cfg.out})")
    return rep.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
