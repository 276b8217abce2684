"""Command line front door.

Verbs: simulate, limit, langevin, study {lln,clt,ito,diagnostics,
langevin-compare}, validate-config.  The config file is the source of
truth; --seed, --workers and --out override its execution section.

Exit codes: 0 all verdicts pass, 2 verdict failure, 1 execution error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .config import build_model, load_config
from .errors import HybridmemError
from .langevin import LangevinProblem, LangevinState, solve_langevin
from .limit import solve_limit
from .pdmp import simulate
from .report import StudyReport, emit_outputs
from .studies import run_study


def _add_common(p):
    p.add_argument("config", help="experiment config file (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override execution.seed")
    p.add_argument("--workers", type=int, default=None, help="override execution.workers")
    p.add_argument("--out", default=None, help="override execution.out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridmem",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", help="run one hybrid path and export it")
    _add_common(p)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--level", type=int, default=-1, help="partition ladder level")
    p.add_argument("--cadence", type=int, default=51)

    p = sub.add_parser("limit", help="solve the deterministic limit system")
    _add_common(p)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--cadence", type=int, default=51)

    p = sub.add_parser("langevin", help="run one Langevin ensemble member")
    _add_common(p)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--level", type=int, default=-1,
                   help="ladder level defining alpha_n")
    p.add_argument("--cadence", type=int, default=51)

    p = sub.add_parser("study", help="run a verdict-bearing study")
    p.add_argument("kind", choices=("lln", "clt", "ito", "diagnostics",
                                    "langevin-compare"))
    _add_common(p)
    p.add_argument("--svg", action="store_true", help="also emit SVG figures")

    p = sub.add_parser("validate-config", help="validate a config and print its hash")
    p.add_argument("config")
    return parser


def _resolve_execution(args, bundle):
    ex = bundle.doc.get("execution", {})
    seed = args.seed if args.seed is not None else int(ex.get("seed", 0))
    workers = args.workers if args.workers is not None else int(ex.get("workers", 1))
    out_dir = args.out if args.out is not None else ex.get("out_dir", "out")
    return seed, workers, out_dir


def _svg_series(report: StudyReport):
    series = {}
    if report.study == "lln":
        pts = [(i + 1, r.estimate) for i, r in
               enumerate(r for r in report.rows if r.metric == "l2_time_error")]
        sup = [(i + 1, r.estimate) for i, r in
               enumerate(r for r in report.rows if r.metric == "sup_error")]
        series["error_vs_level"] = {"l2_time_error": pts, "sup_error": sup}
    elif report.study == "clt":
        ratios = {}
        for r in report.rows:
            if r.metric.startswith("var[") and "const.all" not in r.metric:
                ratios.setdefault(r.metric, []).append(r.estimate)
        ana = {}
        for r in report.rows:
            if r.metric.startswith("analytic["):
                ana.setdefault(r.metric.replace("analytic", "var"), []).append(r.estimate)
        pts = {}
        for name, vals in sorted(ratios.items()):
            avals = ana.get(name)
            if avals:
                pts[name] = [(i + 1, v / a if a else 0.0)
                             for i, (v, a) in enumerate(zip(vals, avals))]
        series["variance_ratio_vs_level"] = pts
    return series


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = load_config(args.config)
        if args.verb == "validate-config":
            from .config import config_hash
            print(f"ok schema_version={doc['schema_version']} hash={config_hash(doc)}")
            return 0
        bundle = build_model(doc)
        seed, workers, out_dir = _resolve_execution(args, bundle)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        if args.verb == "simulate":
            problem = bundle.flow_problem(args.level)
            initial = bundle.initial_hybrid_state(args.level)
            t0 = time.perf_counter()
            path, stats = simulate(initial, args.T, problem, seed=seed, stream=0,
                                   cadence=args.cadence, config_hash=bundle.hash)
            dest = out / "path.jsonl"
            path.export_jsonl(dest, problem.partition)
            print(f"wrote {dest} ({path.n_jumps} jumps, "
                  f"{time.perf_counter() - t0:.2f}s)")
            return 0
        if args.verb == "limit":
            traj = solve_limit(bundle.initial_limit_state(), args.T,
                               bundle.limit_problem(), cadence=args.cadence)
            dest = out / "deterministic.jsonl"
            traj.export_jsonl(dest, bundle.hash)
            print(f"wrote {dest} (p excursion {traj.p_excursion:.2e})")
            return 0
        if args.verb == "langevin":
            partition = bundle.ladder[args.level]
            problem = LangevinProblem(bundle.grid, bundle.operator, bundle.kinetics,
                                      alpha=partition.alpha,
                                      dt_max=bundle.langevin_dt,
                                      bound_tol=bundle.settings.bound_tol)
            state = LangevinState(bundle.initial_u.copy(), bundle.initial_p.copy())
            traj = solve_langevin(state, args.T, problem, seed=seed, stream=0,
                                  cadence=args.cadence)
            dest = out / "langevin.jsonl"
            traj.export_jsonl(dest, bundle.hash)
            print(f"wrote {dest} (alpha={partition.alpha:.6g}, "
                  f"p excursion {traj.p_excursion:.2e})")
            return 0

        # study
        report = run_study(bundle, args.kind, seed=seed, workers=workers)
        formats = ("json", "csv", "svg") if args.svg else ("json", "csv")
        written = emit_outputs(report, out, formats=formats,
                               svg_series=_svg_series(report) if args.svg else None)
        for path in written:
            print(f"wrote {path}")
        for name, verdict in sorted(report.verdicts.items()):
            print(f"verdict {name}: {verdict}")
        return 0 if report.passed else 2
    except HybridmemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
