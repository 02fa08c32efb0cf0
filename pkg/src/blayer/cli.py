"""Command line entry point ``blayer``.

Exit codes: 0 success (a diverged remainder iteration is data, not an
error), 1 validation or solver failure, 2 configuration or I/O failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import load_config
from .errors import ConfigurationError
from .study import STAGES, emit_report, run_study

log = logging.getLogger(__name__)

SUBCOMMANDS = STAGES + ("sweep",)


def build_parser():
    ap = argparse.ArgumentParser(prog="blayer", description="Boundary-layer expansion studies")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the pipeline through '{name}'")
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument("--out", default=f"blayer_{name}", help="output directory")
        p.add_argument("--eps-list", type=float, nargs="+", help="override the eps list")
        p.add_argument("--seed", type=int, help="RNG seed of the random forcing battery")
        p.add_argument("--skip-remainder", action="store_true", help="omit remainder stages")
        p.add_argument("--force", action="store_true", help="continue past failed validation")
        p.add_argument("--no-drift", action="store_true", help="skip the refinement-drift check")
    return ap


def _summary_line(rec):
    parts = [f"eps={rec['eps']:.3e}", rec["status"]]
    if rec["status"] != "ok":
        parts.append(rec["message"])
    for k in ("combined", "max_drift", "stability_ratio_max", "x_norm"):
        if rec.get(k) is not None:
            parts.append(f"{k}={rec[k]:.4e}")
    if "iterate_status" in rec:
        parts.append(f"iterate={rec['iterate_status']}")
    return "  ".join(parts)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.eps_list:
            cfg = replace(cfg, eps_list=tuple(args.eps_list))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.no_drift or args.command in STAGES[:4]:
            cfg = replace(cfg, grid=replace(cfg.grid, drift_check=False))
    except (ConfigurationError, OSError) as exc:
        print(f"blayer: {exc}", file=sys.stderr)
        return 2
    until = "iterate" if args.command == "sweep" else args.command
    try:
        report = run_study(cfg, until=until, force=args.force,
                           skip_remainder=args.skip_remainder, out_dir=args.out)
        emit_report(report, args.out)
    except OSError as exc:
        print(f"blayer: cannot write output: {exc}", file=sys.stderr)
        return 2
    for rec in report["records"]:
        print(_summary_line(rec))
    for q, f in report["fits"].items():
        print(f"fit {q}: slope={f['slope']:.4f} r2={f['r2']:.4f}")
    cor = report["corollary"]
    if until == "iterate":
        if cor["status"] == "ok":
            print(f"corollary: u-slope={cor['u_fit']['slope']:.4f} v-slope={cor['v_fit']['slope']:.4f}")
        else:
            print(f"corollary: skipped ({cor['notice']}); diverged eps: {cor['diverged_eps']}")
    failed = any(r["status"] != "ok" for r in report["records"])
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
