"""Command line front end: forward, invert, check, plot."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import scenario as scn
from .errors import HexqgError, ValidationError

log = logging.getLogger("hexqg")


def _policy_overrides(sc, args):
    if getattr(args, "lambda_grid", None):
        scn.parse_grid_spec(args.lambda_grid, "--lambda-grid")
        sc.policy["grid"] = args.lambda_grid
    if getattr(args, "tol_T", None) is not None:
        sc.policy["tol_T"] = args.tol_T
    if getattr(args, "tol_edge", None) is not None:
        sc.policy["tol_edge"] = args.tol_edge


def _inverse_overrides(args):
    out = {}
    if getattr(args, "tol_misfit", None) is not None:
        out["misfit_tol"] = args.tol_misfit
    if getattr(args, "tol_root", None) is not None:
        out["xtol"] = args.tol_root
    return out


def _load(path, seed):
    sc = scn.load_scenario(path)
    if seed is not None and seed != sc.seed:
        raw = dict(sc.raw)
        raw["seed"] = seed
        sc = scn.parse_scenario(raw, path)
    return sc


def cmd_forward(args):
    sc = _load(args.scenario, args.seed)
    _policy_overrides(sc, args)
    scn.run_forward(sc, args.output, threads=args.threads)
    print(f"wrote {args.output} (scenario {sc.hash})")


def cmd_invert(args):
    if args.live:
        sc = _load(args.source, args.seed)
        _policy_overrides(sc, args)
        report = scn.run_inverse(sc, None, args.threads, **_inverse_overrides(args))
    else:
        header, records = scn.load_dataset(args.source)
        sc = scn.parse_scenario(header["scenario"], f"{args.source}#scenario")
        if args.scenario:
            given = scn.load_scenario(args.scenario)
            if given.hash != header["scenario_hash"]:
                raise ValidationError("scenario does not match the dataset provenance hash",
                                      field="scenario_hash")
        report = scn.run_inverse(sc, (header, records), args.threads, **_inverse_overrides(args))
    formats = ("json", "csv") if args.no_svg else ("json", "csv", "svg")
    files = scn.emit_report(report, args.output, formats)
    d = report.data
    print(f"recovered {len(d['edges'])} edges, max mode error {d['max_mode_error']:.3e}")
    for flag in d["flags"]:
        print(flag)
    for f in files:
        print(f"wrote {f}")


def cmd_check(args):
    sc = _load(args.scenario, args.seed)
    _policy_overrides(sc, args)
    print(json.dumps(scn.check_scenario(sc), indent=1, sort_keys=True))


def cmd_plot(args):
    from .plotting import report_figures
    import os
    data = scn.load_report(args.report)
    outdir = args.output or (args.report if os.path.isdir(args.report) else os.path.dirname(args.report) or ".")
    for f in report_figures(data, outdir):
        print(f"wrote {f}")


def build_parser():
    p = argparse.ArgumentParser(prog="hexqg", description="Hexagonal quantum graph D-N maps and inversion")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--lambda-grid", metavar="a:b:n", help="explicit energy grid")
        sp.add_argument("--tol-T", type=float, dest="tol_T", help="margin around exceptional cos values")
        sp.add_argument("--tol-edge", type=float, dest="tol_edge", help="margin around edge eigenvalues")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--seed", type=int, help="override the scenario seed")

    f = sub.add_parser("forward", help="generate a D-N dataset")
    f.add_argument("scenario")
    f.add_argument("-o", "--output", required=True)
    common(f)
    f.set_defaults(func=cmd_forward)

    i = sub.add_parser("invert", help="reconstruct potentials from a dataset or live oracle")
    i.add_argument("source", help="dataset file, or scenario file with --live")
    i.add_argument("--live", action="store_true")
    i.add_argument("--scenario", help="scenario to check against the dataset provenance")
    i.add_argument("-o", "--output", required=True, help="report directory")
    i.add_argument("--tol-misfit", type=float, dest="tol_misfit")
    i.add_argument("--tol-root", type=float, dest="tol_root")
    i.add_argument("--no-svg", action="store_true")
    common(i)
    i.set_defaults(func=cmd_invert)

    c = sub.add_parser("check", help="validate a scenario and summarise geometry")
    c.add_argument("scenario")
    common(c)
    c.set_defaults(func=cmd_check)

    pl = sub.add_parser("plot", help="render SVG figures for a report")
    pl.add_argument("report")
    pl.add_argument("-o", "--output")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except HexqgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.details:
            detail = {k: v for k, v in exc.details.items() if k not in ("partial", "trace")}
            print(json.dumps(detail, default=str)[:2000], file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
