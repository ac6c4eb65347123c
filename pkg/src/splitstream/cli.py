"""``splitstream <command> --config PATH [--set k=v]... [--out DIR]``

Exit codes: 0 success, 1 configuration error, 2 runtime error. Log verbosity
comes from ``SPLITSTREAM_LOG`` (e.g. ``INFO``, ``DEBUG``; default ``WARNING``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import experiments
from .config import ConfigError, load_config, parse_overrides

COMMANDS = {
    "train": experiments.train,
    "sweep-threshold": experiments.sweep_threshold,
    "compare-naive": experiments.compare_naive,
    "privacy-probe": experiments.privacy_probe,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitstream", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "report"]:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; VALUE is parsed as JSON when possible")
        sp.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
        if name == "report":
            sp.add_argument("--baseline", default="baseline", help="run directory used as baseline")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SPLITSTREAM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    out = args.out or os.path.join("runs", args.command)
    try:
        cfg = load_config(args.config, parse_overrides(args.overrides))
    except (ConfigError, OSError) as exc:
        problems = getattr(exc, "problems", [str(exc)])
        for problem in problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1
    try:
        if args.command == "report":
            result = experiments.report(out, args.baseline)
        else:
            result = COMMANDS[args.command](cfg, out)
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        logging.getLogger("splitstream").debug("run failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(_brief(args.command, result, out), indent=2, default=str))
    return 0


def _brief(command, result, out):
    if command == "train":
        return {"out": out, **result.summary()}
    if isinstance(result, dict):
        return {"out": out, **{k: v for k, v in result.items() if k not in ("logs", "baseline_log")}}
    return {"out": out}


if __name__ == "__main__":
    sys.exit(main())
