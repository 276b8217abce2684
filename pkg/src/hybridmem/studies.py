"""Study runners: LLN ladder, CLT covariance match, Ito isometry,
Langevin comparison and asymptotic-condition diagnostics.

Replicates map onto a worker pool with one RNG stream per replicate;
results reduce in replicate order, so a report depends only on
(config, seed, code version) and never on the worker count.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from . import ensemble
from .config import ModelBundle
from .errors import ConfigError
from .langevin import LangevinProblem, LangevinState, solve_langevin
from .limit import solve_limit
from .martingale import (LevelDiagnostics, analytic_jump_bound,
                         build_test_basis, condition_diagnostics,
                         integrated_limit_G, tracked_functions)
from .model import coordinate_field
from .pdmp import simulate
from .report import MetricRow, StudyReport


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return mean, se


def _variance_se(x):
    """Sample variance and its standard error from the fourth moment."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    xc = x - np.mean(x)
    s2 = float(np.sum(xc * xc) / (n - 1))
    m4 = float(np.mean(xc ** 4))
    var_of_var = (m4 - s2 * s2 * (n - 3) / (n - 1)) / n
    return s2, math.sqrt(max(var_of_var, 0.0))


def _study_section(bundle: ModelBundle, kind: str) -> dict:
    study = bundle.doc.get("study") or {}
    if study.get("kind") not in (None, kind):
        raise ConfigError(f"config study.kind={study.get('kind')!r} does not match {kind!r}")
    return study


def _execution(bundle: ModelBundle, seed=None, workers=None):
    ex = bundle.doc.get("execution", {})
    return (int(ex.get("seed", 0) if seed is None else seed),
            int(ex.get("workers", 1) if workers is None else workers))


def _basis(bundle: ModelBundle, study: dict):
    tf = study.get("test_functions", {})
    return build_test_basis(bundle.grid, bundle.kinetics.m,
                            sine_modes=int(tf.get("sine_modes", 8)),
                            state=tf.get("state"),
                            include_constant=bool(tf.get("include_constant", True)))


# ---------------------------------------------------------------------------
# replicate workers (module level so they can cross the process boundary)


def _lln_worker(idx, problem, initial, T, cadence, det_u, det_p, seed, stream_base):
    path, _stats = simulate(initial.copy(), T, problem, seed=seed,
                            stream=stream_base + idx, cadence=cadence)
    z = path.snap_z(problem.partition)[:, :, problem.partition.node_to_comp]
    h = problem.grid.h
    du = path.snap_u - det_u
    dz = z - det_p
    err_sq = h * (np.sum(du * du, axis=1) + np.sum(dz * dz, axis=(1, 2)))
    sup_err = float(np.sqrt(np.max(err_sq)))
    l2_err = float(np.sqrt(np.trapezoid(err_sq, path.snap_times)))
    return sup_err, l2_err, path.n_jumps


def _mart_worker(idx, problem, initial, T, tracked, seed, stream_base, want_c2, cadence):
    _path, stats = simulate(initial.copy(), T, problem, seed=seed,
                            stream=stream_base + idx, cadence=cadence,
                            track=tracked, want_c2=want_c2)
    return (stats.martingale_T, stats.gn_integral, stats.trace_integral,
            stats.h1_integral, stats.c2_integral, stats.max_jump_pairing,
            stats.n_jumps)


def _pdmp_terminal_worker(idx, problem, initial, T, seed, stream_base, phis, u_phi):
    path, _stats = simulate(initial.copy(), T, problem, seed=seed,
                            stream=stream_base + idx, cadence=2)
    zg = coordinate_field(path.terminal.config, problem.partition).on_grid()
    h = problem.grid.h
    zpair = np.array([float(np.sum(np.sum(phi * zg, axis=0)) * h) for phi in phis])
    upair = float(np.sum(u_phi * path.terminal.membrane.u) * h)
    return zpair, upair


def _langevin_terminal_worker(idx, problem, initial, T, seed, stream_base, phis, u_phi):
    traj = solve_langevin(initial.copy(), T, problem, seed=seed,
                          stream=stream_base + idx, cadence=2)
    h = problem.grid.h
    P_T = traj.p[-1]
    zpair = np.array([float(np.sum(np.sum(phi * P_T, axis=0)) * h) for phi in phis])
    upair = float(np.sum(u_phi * traj.u[-1]) * h)
    return zpair, upair, traj.p_excursion, traj.clamp_steps


# ---------------------------------------------------------------------------
# LLN


def run_lln_study(bundle: ModelBundle, seed=None, workers=None) -> StudyReport:
    """Ladder convergence of the hybrid process to the deterministic limit.

    Per level, estimates E[sup_t ||X^n - x||] and E[L^2((0,T), product)
    error] over replicates; the verdict requires strictly decreasing mean
    L^2 errors and a finest level below the configured tolerance.  Error
    metrics are evaluated on the snapshot cadence grid.
    """
    study = _study_section(bundle, "lln")
    if len(bundle.ladder) < 3:
        raise ConfigError("the LLN study needs a ladder with at least 3 levels")
    T = float(study.get("T", 1.0))
    reps = int(study.get("replicates", 200))
    cadence = int(study.get("cadence", 51))
    tol = float(study.get("tolerances", {}).get("lln_final", 0.05))
    seed, workers = _execution(bundle, seed, workers)

    t_start = time.perf_counter()
    det = solve_limit(bundle.initial_limit_state(), T, bundle.limit_problem(), cadence)
    rows, l2_means, sup_means = [], [], []
    timing = {"deterministic_solve_s": round(time.perf_counter() - t_start, 3)}

    for lev, partition in enumerate(bundle.ladder):
        t0 = time.perf_counter()
        problem = bundle.flow_problem(lev)
        initial = bundle.initial_hybrid_state(lev)
        z0 = coordinate_field(initial.config, partition).on_grid()
        init_res = float(np.sqrt(bundle.grid.h * np.sum((z0 - bundle.initial_p) ** 2)))
        out = ensemble.run_replicates(
            _lln_worker, reps, workers, problem=problem, initial=initial, T=T,
            cadence=cadence, det_u=det.u, det_p=det.p, seed=seed,
            stream_base=lev * 1_000_000)
        sup_mean, sup_se = _mean_se([o[0] for o in out])
        l2_mean, l2_se = _mean_se([o[1] for o in out])
        label = f"L{lev + 1}(K={partition.n_compartments},l={partition.ell_minus})"
        rows.append(MetricRow("lln", label, "sup_error", sup_mean, sup_se, reps))
        rows.append(MetricRow("lln", label, "l2_time_error", l2_mean, l2_se, reps))
        rows.append(MetricRow("lln", label, "initial_residual", init_res, None, 1))
        rows.append(MetricRow("lln", label, "mean_jumps",
                              float(np.mean([o[2] for o in out])), None, reps))
        l2_means.append(l2_mean)
        sup_means.append(sup_mean)
        timing[label] = round(time.perf_counter() - t0, 3)

    decreasing = all(b < a for a, b in zip(l2_means, l2_means[1:]))
    final_ok = l2_means[-1] < tol
    verdicts = {
        "l2_error_strictly_decreasing": "pass" if decreasing else "fail",
        "final_level_below_tolerance": "pass" if final_ok else "fail",
        "sup_error_decreasing": "pass" if all(b < a for a, b in zip(sup_means, sup_means[1:]))
                                 else "fail",
    }
    for lev, v in enumerate(l2_means):
        rows[4 * lev + 1].verdict = "pass" if (lev == 0 or v < l2_means[lev - 1]) else "fail"
    return StudyReport("lln", rows, verdicts,
                       {"config_hash": bundle.hash, "seed": seed,
                        "code_version": __version__},
                       timing)


# ---------------------------------------------------------------------------
# CLT


def run_clt_study(bundle: ModelBundle, seed=None, workers=None) -> StudyReport:
    """Variance of the rescaled martingale against the limit covariance.

    Per level and test function Phi: empirical Var[sqrt(alpha_n) <Phi, M(T)>]
    with a fourth-moment standard error versus the time integral of the
    limit form along the deterministic trajectory; plus pair covariances
    and Gaussianity z-scores.  The gate applies at the finest level.
    """
    study = _study_section(bundle, "clt")
    T = float(study.get("T", 1.0))
    reps = int(study.get("replicates", 1000))
    n_se = float(study.get("tolerances", {}).get("n_se", 3.0))
    balance_tol = float(study.get("tolerances", {}).get("clt_balance", 1e-9))
    seed, workers = _execution(bundle, seed, workers)

    for partition in bundle.ladder:
        if abs(partition.balance_ratio - 1.0) > balance_tol:
            raise ConfigError(
                f"partition balance ratio {partition.balance_ratio} violates the "
                f"CLT hypothesis (tolerance {balance_tol})")

    funcs = _basis(bundle, study)
    timing = {}
    t0 = time.perf_counter()
    det = solve_limit(bundle.initial_limit_state(), T, bundle.limit_problem(),
                      cadence=max(101, int(study.get("cadence", 101))))
    analytic = np.array([
        integrated_limit_G(det, tf, bundle.kinetics, bundle.grid) for tf in funcs])
    timing["deterministic_solve_s"] = round(time.perf_counter() - t0, 3)

    rows = []
    ratio_dev_by_level = []
    finest = len(bundle.ladder) - 1
    verdicts = {}
    for lev, partition in enumerate(bundle.ladder):
        t0 = time.perf_counter()
        problem = bundle.flow_problem(lev)
        initial = bundle.initial_hybrid_state(lev)
        tracked = tracked_functions(funcs, partition)
        out = ensemble.run_replicates(
            _mart_worker, reps, workers, problem=problem, initial=initial, T=T,
            tracked=tracked, seed=seed, stream_base=lev * 1_000_000,
            want_c2=False, cadence=2)
        M = np.stack([o[0] for o in out])          # (R, nphi)
        alpha = partition.alpha
        X = math.sqrt(alpha) * M
        label = f"L{lev + 1}(K={partition.n_compartments},l={partition.ell_minus})"
        devs = []
        for q, tf in enumerate(funcs):
            if tf.label == "const.all":
                exact_zero = bool(np.all(X[:, q] == 0.0)) and analytic[q] == 0.0
                rows.append(MetricRow("clt", label, f"var[{tf.label}]",
                                      float(np.var(X[:, q])), None, reps,
                                      "pass" if exact_zero else "fail"))
                if lev == finest:
                    verdicts["null_vector_exact_zero"] = "pass" if exact_zero else "fail"
                continue
            var, var_se = _variance_se(X[:, q])
            zsc = (var - analytic[q]) / var_se if var_se > 0 else 0.0
            ok = abs(var - analytic[q]) <= n_se * var_se
            rows.append(MetricRow("clt", label, f"var[{tf.label}]", var, var_se, reps,
                                  "pass" if ok else "fail"))
            rows.append(MetricRow("clt", label, f"analytic[{tf.label}]",
                                  float(analytic[q]), None, 0))
            rows.append(MetricRow("clt", label, f"var_z[{tf.label}]", float(zsc), None, reps))
            skew = float(np.mean(((X[:, q] - X[:, q].mean()) / X[:, q].std()) ** 3))
            kurt = float(np.mean(((X[:, q] - X[:, q].mean()) / X[:, q].std()) ** 4)) - 3.0
            rows.append(MetricRow("clt", label, f"skew_z[{tf.label}]",
                                  skew * math.sqrt(reps / 6.0), None, reps))
            rows.append(MetricRow("clt", label, f"kurt_z[{tf.label}]",
                                  kurt * math.sqrt(reps / 24.0), None, reps))
            devs.append(abs(var / analytic[q] - 1.0) if analytic[q] > 0 else 0.0)
            if lev == finest:
                verdicts[f"variance_match[{tf.label}]"] = "pass" if ok else "fail"
        # cross covariances for adjacent sine modes
        sines = [q for q, tf in enumerate(funcs) if tf.label != "const.all"]
        for qa, qb in zip(sines, sines[1:]):
            emp = float(np.cov(X[:, qa], X[:, qb], ddof=1)[0, 1])
            ana = integrated_limit_G(det, funcs[qa], bundle.kinetics, bundle.grid,
                                     psi=funcs[qb])
            rows.append(MetricRow("clt", label,
                                  f"cov[{funcs[qa].label},{funcs[qb].label}]",
                                  emp, None, reps))
            rows.append(MetricRow("clt", label,
                                  f"analytic_cov[{funcs[qa].label},{funcs[qb].label}]",
                                  float(ana), None, 0))
        ratio_dev_by_level.append(float(np.mean(devs)) if devs else 0.0)
        timing[label] = round(time.perf_counter() - t0, 3)

    if len(ratio_dev_by_level) >= 2:
        trend_ok = all(b <= a + 0.05 for a, b in zip(ratio_dev_by_level, ratio_dev_by_level[1:]))
        verdicts["variance_ratio_trend"] = "pass" if trend_ok else "fail"
    return StudyReport("clt", rows, verdicts,
                       {"config_hash": bundle.hash, "seed": seed,
                        "code_version": __version__}, timing)


# ---------------------------------------------------------------------------
# Ito isometry + martingale zero mean


def run_ito_study(bundle: ModelBundle, seed=None, workers=None) -> StudyReport:
    """Two-sided isometry check plus the martingale zero-mean gate."""
    study = _study_section(bundle, "ito")
    T = float(study.get("T", 1.0))
    reps = int(study.get("replicates", 10_000))
    n_se = float(study.get("tolerances", {}).get("n_se", 3.0))
    level = int(study.get("level", -1))
    seed, workers = _execution(bundle, seed, workers)

    funcs = _basis(bundle, study)
    partition = bundle.ladder[level]
    problem = bundle.flow_problem(level)
    initial = bundle.initial_hybrid_state(level)
    tracked = tracked_functions(funcs, partition)

    t0 = time.perf_counter()
    out = ensemble.run_replicates(
        _mart_worker, reps, workers, problem=problem, initial=initial, T=T,
        tracked=tracked, seed=seed, stream_base=0, want_c2=False, cadence=2)
    M = np.stack([o[0] for o in out])
    GN = np.stack([o[1] for o in out])
    timing = {"ensemble_s": round(time.perf_counter() - t0, 3)}

    rows = []
    verdicts = {}
    label = f"L(K={partition.n_compartments},l={partition.ell_minus})"
    for q, tf in enumerate(funcs):
        mean, mean_se = _mean_se(M[:, q])
        zero_ok = abs(mean) <= n_se * mean_se if mean_se > 0 else mean == 0.0
        rows.append(MetricRow("ito", label, f"mean_M[{tf.label}]", mean, mean_se, reps,
                              "pass" if zero_ok else "fail"))
        verdicts[f"zero_mean[{tf.label}]"] = "pass" if zero_ok else "fail"

        lhs, lhs_se = _mean_se(M[:, q] ** 2)
        rhs, rhs_se = _mean_se(GN[:, q])
        combined = math.hypot(lhs_se, rhs_se)
        if combined == 0.0:
            ok = lhs == rhs
        else:
            ok = abs(lhs - rhs) <= n_se * combined
        rows.append(MetricRow("ito", label, f"isometry_lhs[{tf.label}]", lhs, lhs_se, reps))
        rows.append(MetricRow("ito", label, f"isometry_rhs[{tf.label}]", rhs, rhs_se, reps))
        rows.append(MetricRow("ito", label, f"isometry_residual[{tf.label}]",
                              lhs - rhs, combined, reps, "pass" if ok else "fail"))
        verdicts[f"isometry[{tf.label}]"] = "pass" if ok else "fail"
    return StudyReport("ito", rows, verdicts,
                       {"config_hash": bundle.hash, "seed": seed,
                        "code_version": __version__}, timing)


# ---------------------------------------------------------------------------
# Langevin comparison


def run_langevin_compare(bundle: ModelBundle, seed=None, workers=None) -> StudyReport:
    """PDMP ensemble versus Langevin ensemble at matched fluctuation scale.

    Diagnostic study: reports means and variances of terminal pairings with
    confidence intervals and their discrepancies; no pass/fail gate.
    """
    study = _study_section(bundle, "langevin-compare")
    T = float(study.get("T", 1.0))
    reps = int(study.get("replicates", 200))
    level = int(study.get("level", -1))
    seed, workers = _execution(bundle, seed, workers)

    partition = bundle.ladder[level]
    alpha = float(study.get("alpha_n") or partition.alpha)
    funcs = _basis(bundle, study)
    phis = [tf.values for tf in funcs]
    u_phi = np.sin(np.pi * bundle.grid.nodes / bundle.grid.L)

    problem = bundle.flow_problem(level)
    initial = bundle.initial_hybrid_state(level)
    t0 = time.perf_counter()
    pd_out = ensemble.run_replicates(
        _pdmp_terminal_worker, reps, workers, problem=problem, initial=initial,
        T=T, seed=seed, stream_base=0, phis=phis, u_phi=u_phi)
    timing = {"pdmp_ensemble_s": round(time.perf_counter() - t0, 3)}

    lang_problem = LangevinProblem(bundle.grid, bundle.operator, bundle.kinetics,
                                   alpha=alpha, dt_max=bundle.langevin_dt,
                                   bound_tol=bundle.settings.bound_tol)
    lang_initial = LangevinState(bundle.initial_u.copy(), bundle.initial_p.copy(), 0.0)
    t0 = time.perf_counter()
    lg_out = ensemble.run_replicates(
        _langevin_terminal_worker, reps, workers, problem=lang_problem,
        initial=lang_initial, T=T, seed=seed, stream_base=5_000_000,
        phis=phis, u_phi=u_phi)
    timing["langevin_ensemble_s"] = round(time.perf_counter() - t0, 3)

    rows = []
    label = f"alpha={alpha:.6g}"
    pd_z = np.stack([o[0] for o in pd_out])
    lg_z = np.stack([o[0] for o in lg_out])
    pd_u = np.array([o[1] for o in pd_out])
    lg_u = np.array([o[1] for o in lg_out])
    for q, tf in enumerate(funcs):
        pm, ps = _mean_se(pd_z[:, q])
        lm, ls = _mean_se(lg_z[:, q])
        rows.append(MetricRow("langevin-compare", label, f"pdmp_mean[{tf.label}]",
                              pm, ps, reps, "diagnostic"))
        rows.append(MetricRow("langevin-compare", label, f"langevin_mean[{tf.label}]",
                              lm, ls, reps, "diagnostic"))
        gap = pm - lm
        gap_se = math.hypot(ps, ls)
        rows.append(MetricRow("langevin-compare", label, f"mean_gap[{tf.label}]",
                              gap, gap_se, reps, "diagnostic"))
        pv, pvs = _variance_se(pd_z[:, q])
        lv, lvs = _variance_se(lg_z[:, q])
        rows.append(MetricRow("langevin-compare", label, f"pdmp_var[{tf.label}]",
                              pv, pvs, reps, "diagnostic"))
        rows.append(MetricRow("langevin-compare", label, f"langevin_var[{tf.label}]",
                              lv, lvs, reps, "diagnostic"))
        rows.append(MetricRow("langevin-compare", label, f"var_ratio[{tf.label}]",
                              pv / lv if lv > 0 else math.nan, None, reps, "diagnostic"))
    pm, ps = _mean_se(pd_u)
    lm, ls = _mean_se(lg_u)
    rows.append(MetricRow("langevin-compare", label, "pdmp_mean[u.sine1]", pm, ps, reps,
                          "diagnostic"))
    rows.append(MetricRow("langevin-compare", label, "langevin_mean[u.sine1]", lm, ls,
                          reps, "diagnostic"))
    rows.append(MetricRow("langevin-compare", label, "p_excursion_max",
                          float(np.max([o[2] for o in lg_out])), None, reps, "diagnostic"))
    rows.append(MetricRow("langevin-compare", label, "clamp_steps_total",
                          float(np.sum([o[3] for o in lg_out])), None, reps, "diagnostic"))
    return StudyReport("langevin-compare", rows, {"comparison": "diagnostic"},
                       {"config_hash": bundle.hash, "seed": seed,
                        "code_version": __version__}, timing)


# ---------------------------------------------------------------------------
# diagnostics


def run_diagnostics(bundle: ModelBundle, seed=None, workers=None) -> StudyReport:
    """Empirical trends behind the limit-theorem conditions across the ladder."""
    study = _study_section(bundle, "diagnostics")
    T = float(study.get("T", 1.0))
    reps = int(study.get("replicates", 32))
    seed, workers = _execution(bundle, seed, workers)
    funcs = _basis(bundle, study)

    levels = []
    timing = {}
    for lev, partition in enumerate(bundle.ladder):
        t0 = time.perf_counter()
        problem = bundle.flow_problem(lev)
        initial = bundle.initial_hybrid_state(lev)
        tracked = tracked_functions(funcs, partition)
        out = ensemble.run_replicates(
            _mart_worker, reps, workers, problem=problem, initial=initial, T=T,
            tracked=tracked, seed=seed, stream_base=lev * 1_000_000,
            want_c2=True, cadence=2)
        label = f"L{lev + 1}(K={partition.n_compartments},l={partition.ell_minus})"
        levels.append(LevelDiagnostics(
            label=label, alpha=partition.alpha, delta_plus=partition.delta_plus,
            ell_minus=partition.ell_minus, T=T,
            trace_integrals=np.array([o[2] for o in out]),
            c2_integrals=np.array([o[4] for o in out]),
            max_pairings=np.stack([o[5] for o in out]),
            jump_bound=analytic_jump_bound(funcs, problem),
            h1_integrals=np.array([o[3] for o in out]),
            gn_integrals=np.array([float(np.sum(o[1])) for o in out])))
        timing[label] = round(time.perf_counter() - t0, 3)

    diag = condition_diagnostics(levels)
    rows = [MetricRow("diagnostics", r["level"], r["metric"], r["estimate"],
                      r.get("stderr"), r.get("n", 0)) for r in diag.rows]
    verdicts = dict(diag.verdicts)
    budget = bundle.settings.h1_budget
    if budget is not None:
        worst = max(float(np.max(lv.h1_integrals)) for lv in levels)
        verdicts["h1_budget"] = "pass" if worst <= float(budget) else "fail"
        rows.append(MetricRow("diagnostics", "all", "h1_budget_worst", worst, None, reps))
    return StudyReport("diagnostics", rows, verdicts,
                       {"config_hash": bundle.hash, "seed": seed,
                        "code_version": __version__}, timing)


STUDY_RUNNERS = {
    "lln": run_lln_study,
    "clt": run_clt_study,
    "ito": run_ito_study,
    "langevin-compare": run_langevin_compare,
    "diagnostics": run_diagnostics,
}


def run_study(bundle: ModelBundle, kind: str | None = None, seed=None, workers=None) -> StudyReport:
    study = bundle.doc.get("study")
    if kind is None:
        if not study or "kind" not in study:
            raise ConfigError("config has no study section; pass a study kind")
        kind = study["kind"]
    if kind not in STUDY_RUNNERS:
        raise ConfigError(f"unknown study kind {kind!r}")
    return STUDY_RUNNERS[kind](bundle, seed=seed, workers=workers)
