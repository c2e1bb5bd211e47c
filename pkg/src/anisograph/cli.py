"""Command line entry point: ``anisograph <stage|report|run> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config
from .errors import AnisographError, ConfigError, InvalidMu, MissingUpstream
from .pipeline import STAGES, aggregate, run_pipeline, run_stage, write_report


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--seed", type=int, help="seed for all sampling")
    p.add_argument("--out", help="output directory (default: output.dir)")
    p.add_argument("--emit-plots", action="store_true", help="write SVG figures")
    p.add_argument("--force", action="store_true", help="ignore cached results of this stage")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="anisograph", parents=[common],
                                 description="Build and verify the staged barrier construction.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common], help=f"run the {name} stage from the cache")
        if name == "solve":
            sp.add_argument("--R", type=float, action="append", dest="radii",
                            help="ball radius (repeatable)")
    sub.add_parser("report", parents=[common], help="aggregate cached stage records")
    sp = sub.add_parser("run", parents=[common], help="run every stage in order")
    sp.add_argument("--R", type=float, action="append", dest="radii")
    return ap


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = config.parse_value(value)
    if args.seed is not None:
        out["seed"] = args.seed
    if getattr(args, "radii", None):
        out["pde.R"] = list(args.radii)
    if args.emit_plots:
        out["output.plots"] = True
    return out


def _summary(name, report) -> str:
    return json.dumps({"stage": name, "pass": bool(report.get("pass")),
                       "checks": report.get("checks"),
                       "error": (report.get("error") or {}).get("type")}, sort_keys=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config.load(args.config, _overrides(args))
    except (ConfigError, InvalidMu) as exc:
        print(f"config rejected: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    plots = cfg["output.plots"]
    try:
        if args.command == "run":
            rep = run_pipeline(cfg, out, emit_plots=plots, force=args.force)
            for name, r in rep.stages.items():
                print(_summary(name, r))
            print(json.dumps({"pass": rep.passed, "halted_at": rep.halted_at}))
            return 0 if rep.passed else 1
        if args.command == "report":
            rep = aggregate(cfg, out)
            write_report(rep, out)
            print(json.dumps({"pass": rep.passed, "halted_at": rep.halted_at,
                              "stages": list(rep.stages)}))
            return 0 if rep.passed else 1
        art, report, secs, cached = run_stage(args.command, cfg, out, force=args.force)
        if plots:
            from .plots import emit_stage
            emit_stage(args.command, art, out)
        print(_summary(args.command, report))
        return 0 if report.get("pass") else 1
    except MissingUpstream as exc:
        print(f"missing upstream artifact: {exc}", file=sys.stderr)
        return 3
    except AnisographError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
