"""Command-line entry point: run scenarios, sweep fixed baselines, evaluate
analytical bounds, and compare emitted result sets.

Errors are reported as a JSON object on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bounds, harness


def _cmd_run(args) -> int:
    scenario = harness.load_scenario(args.config)
    series = harness.run(scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.emit(series, "csv", out / f"{scenario.name}.csv")
    harness.emit(series, "json", out / f"{scenario.name}.json")
    print(f"wrote {out / scenario.name}.{{csv,json}} ({len(series.records)} slots)")
    return 0


def _parse_grid(spec: str, n_classes: int):
    """Grid spec: comma-separated shared factors ('0.2,0.4,...') or
    semicolon-separated per-class vectors ('0.2,0.4;0.6,0.8')."""
    if ";" in spec:
        return [[float(x) for x in part.split(",")] for part in spec.split(";")]
    return [[float(x)] * n_classes for x in spec.split(",")]


def _cmd_sweep(args) -> int:
    scenario = harness.load_scenario(args.config)
    grid = _parse_grid(args.grid, scenario.network.n_classes)
    best_p, best_utility = harness.sweep_fixed_baseline(
        scenario, grid, max_workers=args.workers
    )
    print(
        json.dumps(
            {"best_p": [float(x) for x in best_p], "mean_utility": best_utility}
        )
    )
    return 0


def _cmd_bound(args) -> int:
    with open(args.config) as handle:
        blob = json.load(handle)
    params = bounds.BoundParams(**blob)
    eps = bounds.epsilon_n(params)
    sparsity = bounds.max_sparsity(params)
    report = {
        "epsilon_n": eps,
        "max_sparsity": sparsity.value,
        "feasible": sparsity.feasible,
        "sparsity_lower_bound": sparsity.lower_bound,
        "accuracy_bound_at_max": (
            bounds.theorem1_bound(sparsity.value, params)
            if sparsity.feasible
            else None
        ),
    }
    print(json.dumps(report))
    return 0


def _cmd_compare(args) -> int:
    series = []
    for directory in args.dirs:
        for path in sorted(Path(directory).glob("*.json")):
            series.append(harness.load_series(path))
    rows = harness.compare(series, seed=args.seed)
    print(json.dumps(rows, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparseran",
        description="Closed-loop massive random-access control simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one scenario and emit metrics")
    p_run.add_argument("--config", required=True, help="scenario JSON file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="grid-search the fixed baseline")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--grid", required=True, help="grid spec, see docs")
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_bound = sub.add_parser("bound", help="evaluate the analytical bounds")
    p_bound.add_argument("--config", required=True, help="bound-params JSON file")
    p_bound.set_defaults(func=_cmd_bound)

    p_cmp = sub.add_parser("compare", help="summarize emitted JSON result sets")
    p_cmp.add_argument("dirs", nargs="+")
    p_cmp.add_argument("--seed", type=int, default=0)
    p_cmp.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # surfaced as machine-readable JSON
        json.dump(
            {"error": type(err).__name__, "message": str(err)}, sys.stderr
        )
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
