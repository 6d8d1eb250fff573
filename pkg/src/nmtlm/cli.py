"""Command line: run, presets, fit, report."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .scaling import fit_power_law, group, read_observations


def _run(args):
    try:
        plan = harness.ExperimentPlan.load(args.plan)
    except harness.PlanError as e:
        print(f"invalid plan: {e}", file=sys.stderr)
        return harness.EXIT_INVALID
    code, rows = harness.run_plan(plan, args.out)
    print(f"{len(rows)} metric rows written; exit {code}")
    return code


def _presets(args):
    plans = harness.preset_plans()
    for name, raw in plans.items():
        plan = harness.ExperimentPlan.from_dict(raw)
        print(f"{name}: {len(plan.cells())} cells, plan hash {plan.hash}")
        if args.write:
            Path(args.write).mkdir(parents=True, exist_ok=True)
            plan.dump(Path(args.write) / f"{name}.yaml")
    return harness.EXIT_OK


def _fit(args):
    try:
        obs = read_observations(args.observations)
    except (OSError, KeyError, ValueError) as e:
        print(f"cannot read observations: {e}", file=sys.stderr)
        return harness.EXIT_INVALID
    for (fam, sl), items in sorted(group(obs).items()):
        try:
            fit = fit_power_law(items, args.N0)
        except ValueError as e:
            print(f"family={fam} slice={sl} status=error ({e})")
            continue
        print(f"family={fam} slice={sl} {fit.describe()}")
    return harness.EXIT_OK


def _report(args):
    if not (Path(args.results) / "rows.csv").exists():
        print(f"no rows.csv in {args.results}", file=sys.stderr)
        return harness.EXIT_INVALID
    harness.report(args.results)
    print((Path(args.results) / "fits.txt").read_text(), end="")
    return harness.EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="nmtlm", description="Desk-scale EncDec vs LM translation experiments")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment plan")
    p.add_argument("plan")
    p.add_argument("--out", help="results directory (default: plan output_dir or results/<name>)")
    p.set_defaults(fn=_run)
    p = sub.add_parser("presets", help="list the preset plans")
    p.add_argument("--write", metavar="DIR", help="also write them as YAML files")
    p.set_defaults(fn=_presets)
    p = sub.add_parser("fit", help="fit power laws to an observations CSV")
    p.add_argument("observations")
    p.add_argument("--N0", type=float, required=True, help="anchor parameter count")
    p.set_defaults(fn=_fit)
    p = sub.add_parser("report", help="recompute fits and plot CSVs from rows.csv")
    p.add_argument("results")
    p.set_defaults(fn=_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
