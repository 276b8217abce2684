"""Martingale extraction, compensators, quadratic variation and the limit covariance.

All dual pairings go through smooth test functions and the grid quadrature;
no negative-order norms are ever computed intrinsically.  The jump-side
quadratic form and its trace admit exact enumeration over the finitely many
events, which every statistical estimator here is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from . import ensemble
from .errors import AnalysisError, ValidationError
from .kinetics import ChannelKinetics
from .model import (ChannelConfiguration, Partition, SpatialGrid,
                    coordinate_field, jump_event_rates)
from .pde import FlowProblem, _check_status
from .pdmp import HybridPath, HybridState, PathStats, TrackedFunctions, simulate


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class TestFunction:
    """Per-state smooth grid functions phi_j used for dual pairings."""

    values: np.ndarray      # (m, N)
    label: str

    @property
    def m(self) -> int:
        return self.values.shape[0]


def sine_mode(grid: SpatialGrid, m: int, state: int, mode: int,
              amplitude: float = 1.0) -> TestFunction:
    vals = np.zeros((m, grid.N))
    vals[state] = amplitude * np.sin(mode * np.pi * grid.nodes / grid.L)
    return TestFunction(vals, f"sine{mode}.s{state + 1}")


def constant_function(grid: SpatialGrid, m: int, value: float = 1.0,
                      state: int | None = None) -> TestFunction:
    vals = np.zeros((m, grid.N))
    if state is None:
        vals[:] = value
        return TestFunction(vals, "const.all")
    vals[state] = value
    return TestFunction(vals, f"const.s{state + 1}")


def polynomial_function(grid: SpatialGrid, m: int, state: int, degree: int) -> TestFunction:
    x = grid.nodes / grid.L
    vals = np.zeros((m, grid.N))
    vals[state] = (x ** degree) * (1.0 - x)
    return TestFunction(vals, f"poly{degree}.s{state + 1}")


def bump_function(grid: SpatialGrid, m: int, state: int, center: float,
                  width: float) -> TestFunction:
    x = grid.nodes
    vals = np.zeros((m, grid.N))
    vals[state] = np.exp(-((x - center) / width) ** 2)
    return TestFunction(vals, f"bump({center},{width}).s{state + 1}")


def build_test_basis(grid: SpatialGrid, m: int, sine_modes: int = 8,
                     state: int | None = None, include_constant: bool = True):
    """Default tracked set: sine modes in one state plus the conservation null vector."""
    s = (m - 1) if state is None else state
    funcs = [sine_mode(grid, m, s, k) for k in range(1, sine_modes + 1)]
    if include_constant:
        funcs.append(constant_function(grid, m, 1.0))
    return funcs


def tracked_functions(funcs, partition: Partition) -> TrackedFunctions:
    """Precompute indicator pairings <phi_i, 1_{D_k}> for the kernels."""
    pair = np.stack([
        np.stack([partition.indicator_pairings(tf.values[i]) for i in range(tf.m)])
        for tf in funcs
    ])
    return TrackedFunctions(np.ascontiguousarray(pair), [tf.label for tf in funcs])


def pair_field(tf: TestFunction, values: np.ndarray, grid: SpatialGrid) -> float:
    """Dual pairing <Phi, v> = sum_i int phi_i v_i via the grid quadrature."""
    per_node = np.sum(tf.values * values, axis=0)
    return float(np.sum(per_node) * grid.h)


# ---------------------------------------------------------------------------
# compensator


def compensator_drift(state: HybridState, kinetics: ChannelKinetics,
                      partition: Partition) -> np.ndarray:
    """Closed-form generator drift of the coordinate fields, shape (m, N).

    Per compartment, drift_i = sum_{j != i} (z_j q_ji(avg u) - z_i q_ij(avg u)):
    the master-equation form with compartment-averaged rate arguments.
    """
    z = coordinate_field(state.config, partition).values
    rates = jump_event_rates(state, kinetics, partition)
    K = partition.n_compartments
    drift = np.zeros((kinetics.m, K))
    occ = partition.channels > 0
    linv = np.zeros(K)
    linv[occ] = 1.0 / partition.channels[occ]
    for (i, j) in sorted(kinetics.rate_functions):
        # counts[i]*q_ij / l == z_i * q_ij
        flux = rates.rates[:, i, j] * linv
        drift[j] += flux
        drift[i] -= flux
    return drift[:, partition.node_to_comp]


def compensator_drift_enumeration(state: HybridState, kinetics: ChannelKinetics,
                                  partition: Partition) -> np.ndarray:
    """Brute-force drift: sum over every jump event of rate times jump size."""
    rates = jump_event_rates(state, kinetics, partition)
    drift = np.zeros((kinetics.m, partition.n_compartments))
    for k, i, j, rate in rates.entries():
        step = rate / partition.channels[k]
        drift[i, k] -= step
        drift[j, k] += step
    return drift[:, partition.node_to_comp]


# ---------------------------------------------------------------------------
# quadratic forms


class QuadraticForm:
    """Symmetric non-negative bilinear form over test-function pairs."""

    def __init__(self, evaluate_fn, provenance: str, trace_fns=None):
        self._evaluate = evaluate_fn
        self.provenance = provenance
        self._trace_fns = trace_fns or {}

    def __call__(self, phi: TestFunction, psi: TestFunction) -> float:
        return self._evaluate(phi, psi)

    def evaluate(self, phi: TestFunction, psi: TestFunction) -> float:
        return self._evaluate(phi, psi)

    def trace_direct(self) -> float:
        if "direct" not in self._trace_fns:
            raise AnalysisError(f"{self.provenance} exposes no direct trace")
        return self._trace_fns["direct"]()

    def trace_via_basis(self) -> float:
        if "basis" not in self._trace_fns:
            raise AnalysisError(f"{self.provenance} exposes no basis trace")
        return self._trace_fns["basis"]()


def empirical_Gn(state: HybridState, kinetics: ChannelKinetics,
                 partition: Partition) -> QuadraticForm:
    """Jump quadratic-variation form at one state, by exact event enumeration.

    q(Phi, Psi) = sum over events (k, i->j) of
    rate * <Psi, dz> <Phi, dz>, where dz moves mass 1/l(k) from state i to
    state j on compartment k.
    """
    rates = jump_event_rates(state, kinetics, partition)
    events = list(rates.entries())
    h = partition.grid.h

    def evaluate(phi: TestFunction, psi: TestFunction) -> float:
        Pphi = np.stack([partition.indicator_pairings(phi.values[i]) for i in range(phi.m)])
        Ppsi = np.stack([partition.indicator_pairings(psi.values[i]) for i in range(psi.m)])
        total = 0.0
        for k, i, j, rate in events:
            l = partition.channels[k]
            total += rate * ((Ppsi[j, k] - Ppsi[i, k]) / l) * ((Pphi[j, k] - Pphi[i, k]) / l)
        return total

    def trace_direct() -> float:
        # Lambda * integral of ||dz||^2 over mu: each event contributes
        # rate * 2 |D_k| / l(k)^2
        total = 0.0
        for k, _i, _j, rate in events:
            total += rate * 2.0 * partition.lengths[k] / partition.channels[k] ** 2
        return total

    def trace_via_basis() -> float:
        # canonical discrete orthonormal basis e_{x,i} = indicator/sqrt(h):
        # sum_k q(e_k, e_k) via Parseval, accumulated nodewise
        total = 0.0
        for k, i, j, rate in events:
            cells = int(partition.cells_per_compartment[k])
            dz = 1.0 / partition.channels[k]
            # states i and j each change by dz on every cell of D_k
            for _ in (i, j):
                total += rate * cells * h * dz * dz
        return total

    return QuadraticForm(evaluate, "empirical-Gn",
                         {"direct": trace_direct, "basis": trace_via_basis})


def covariance_matrices(u: np.ndarray, p: np.ndarray,
                        kinetics: ChannelKinetics) -> np.ndarray:
    """Nodewise limit covariance D(x), shape (N, m, m).

    Every state pair contributes s = p_i q_ij(u) + p_j q_ji(u) positively to
    both diagonal entries and negatively to both off-diagonal entries, so
    the all-ones vector is annihilated.
    """
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    N = u.shape[0]
    m = kinetics.m
    D = np.zeros((N, m, m))
    rate_at = {pair: q(u) for pair, q in kinetics.rate_functions.items()}
    seen = set()
    for (i, j) in kinetics.rate_functions:
        a, b = min(i, j), max(i, j)
        if (a, b) in seen:
            continue
        seen.add((a, b))
        s = np.zeros(N)
        if (a, b) in rate_at:
            s = s + p[a] * rate_at[(a, b)]
        if (b, a) in rate_at:
            s = s + p[b] * rate_at[(b, a)]
        D[:, a, a] += s
        D[:, b, b] += s
        D[:, a, b] -= s
        D[:, b, a] -= s
    return D


def limit_G(u: np.ndarray, p: np.ndarray, kinetics: ChannelKinetics,
            grid: SpatialGrid) -> QuadraticForm:
    """Limit covariance bilinear form at a deterministic state (u, p).

    The default evaluation contracts the nodewise matrix D(x); the
    four-term route mirrors the defining display term by term.  Both agree
    to 1e-12.
    """
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    mass_err = float(np.max(np.abs(p.sum(axis=0) - 1.0)))
    if mass_err > 1e-8:
        raise ValidationError(f"p mass violation {mass_err:.3e} beyond 1e-8")
    D = covariance_matrices(u, p, kinetics)
    h = grid.h

    def evaluate(phi: TestFunction, psi: TestFunction) -> float:
        tmp = np.einsum("nij,jn->in", D, psi.values)
        per_node = np.sum(phi.values * tmp, axis=0)
        return float(np.sum(per_node) * h)

    def evaluate_four_term(phi: TestFunction, psi: TestFunction) -> float:
        rate_at = {pair: q(u) for pair, q in kinetics.rate_functions.items()}
        t1 = t2 = t3 = t4 = 0.0
        for (i, j), q in rate_at.items():
            w = p[i] * q
            t1 += float(np.sum(w * psi.values[j] * phi.values[j]) * h)
            t2 += float(np.sum(w * psi.values[i] * phi.values[i]) * h)
            t3 -= float(np.sum(w * psi.values[j] * phi.values[i]) * h)
            t4 -= float(np.sum(w * psi.values[i] * phi.values[j]) * h)
        return t1 + t2 + t3 + t4

    form = QuadraticForm(evaluate, "limit-G")
    form.evaluate_four_term = evaluate_four_term
    form.matrices = D
    return form


def integrated_limit_G(trajectory, phi: TestFunction, kinetics: ChannelKinetics,
                       grid: SpatialGrid, psi: TestFunction | None = None) -> float:
    """Trapezoid integral of the limit form along a deterministic trajectory."""
    psi = phi if psi is None else psi
    vals = np.array([
        limit_G(trajectory.u[s], trajectory.p[s], kinetics, grid)(phi, psi)
        for s in range(len(trajectory.times))
    ])
    return float(np.trapezoid(vals, trajectory.times))


# ---------------------------------------------------------------------------
# martingale paths (replay)


@dataclass
class MartingalePath:
    """<Phi, M(t)> sampled at jump and snapshot times (right-continuous)."""

    times: np.ndarray          # (nt,)
    values: np.ndarray         # (nt, nphi)
    compensator: np.ndarray    # (nt, nphi) integral of <Phi, drift> up to t
    pairing_start: np.ndarray  # (nphi,) <Phi, z(0)>
    labels: list

    def final(self) -> np.ndarray:
        return self.values[-1]


def replay_path(path: HybridPath, problem: FlowProblem,
                tracked: TrackedFunctions, want_c2: bool = False,
                snapshot_tol: float = 1e-8):
    """Re-flow a recorded path through its jump log.

    The substep schedule reproduces the original simulation exactly, so the
    snapshots must match within solver tolerance; a mismatch marks a stale
    or corrupted path.  Returns (times, M values, compensator values,
    PathStats-like accumulators dict).
    """
    part = problem.partition
    u = path.snap_u[0].astype(float).copy()
    config = ChannelConfiguration(path.snap_counts[0].copy())
    counts = config.counts
    z = coordinate_field(config, part)
    tables = tracked.tables(problem)
    nphi = tracked.nphi

    acc = np.zeros(4)
    cp_int = np.zeros(nphi)
    gn_int = np.zeros(nphi)
    jump_sum = np.zeros(nphi)

    times = [path.snap_times[0]]
    values = [np.zeros(nphi)]
    comp = [np.zeros(nphi)]

    t = float(path.snap_times[0])
    next_jump = 0
    next_snap = 1
    nj = path.n_jumps
    S = len(path.snap_times)
    t_end = float(path.snap_times[-1])
    max_snap_err = 0.0

    while True:
        tj = path.jump_times[next_jump] if next_jump < nj else math.inf
        ts = path.snap_times[next_snap] if next_snap < S else math.inf
        t_stop = min(tj, ts, t_end)
        if t_stop > t:
            status, t, _H, _lam, viol, _n, _rt = problem.run_segment(
                u, t, t_stop, math.inf, 0.0, counts, z.values,
                track=tables, want_c2=want_c2, acc=acc, cp_int=cp_int, gn_int=gn_int)
            _check_status(status, viol, t)
        if next_jump < nj and t_stop == tj:
            k, i, j = (int(v) for v in path.jump_events[next_jump])
            config.apply_event(k, i, j)
            jump_sum += (tracked.pairings[:, j, k] - tracked.pairings[:, i, k]) / part.channels[k]
            z = coordinate_field(config, part)
            next_jump += 1
            times.append(t)
            values.append(jump_sum - cp_int)
            comp.append(cp_int.copy())
        elif next_snap < S and t_stop == ts:
            err = float(np.max(np.abs(u - path.snap_u[next_snap])))
            max_snap_err = max(max_snap_err, err)
            if err > snapshot_tol:
                raise AnalysisError(
                    f"replay diverged from recorded snapshot at t={t} by {err:.3e}")
            if not np.array_equal(counts, path.snap_counts[next_snap]):
                raise AnalysisError(f"replay channel counts diverged at t={t}")
            next_snap += 1
            times.append(t)
            values.append(jump_sum - cp_int)
            comp.append(cp_int.copy())
        else:
            break

    extras = {"acc": acc, "gn_int": gn_int, "cp_int": cp_int, "jump_sum": jump_sum,
              "max_snapshot_error": max_snap_err}
    return np.array(times), np.vstack(values), np.vstack(comp), extras


def martingale_path(path: HybridPath, phi, problem: FlowProblem,
                    quadrature_tol: float = 1e-5) -> MartingalePath:
    """Extract <Phi, M(t)> for one test function (or a tracked set).

    The compensator integral uses jump-aligned trapezoid quadrature on the
    flow substep grid; if its estimated error exceeds ``quadrature_tol``
    the path cadence / dt_max are too coarse and an AnalysisError advises
    re-running with a denser cadence.
    """
    if isinstance(phi, TestFunction):
        tracked = tracked_functions([phi], problem.partition)
    else:
        tracked = phi
    times, values, comp, _extras = replay_path(path, problem, tracked)

    # quadrature error estimate by step halving: replay the log once more
    # with twice the substep resolution and compare the compensators
    fine = FlowProblem(problem.grid, problem.operator, problem.kinetics,
                       problem.partition,
                       dc_replace(problem.settings,
                                  dt_max=problem.settings.dt_max / 2.0,
                                  hazard_samples=2 * problem.settings.hazard_samples))
    _t2, _v2, comp2, _e2 = replay_path(path, fine, tracked, snapshot_tol=math.inf)
    est = float(np.max(np.abs(comp[-1] - comp2[-1]))) if len(comp) else 0.0
    if est > quadrature_tol:
        raise AnalysisError(
            f"compensator quadrature error ~{est:.2e} above {quadrature_tol}; "
            "re-run with denser snapshot cadence or smaller dt_max")

    z0 = coordinate_field(ChannelConfiguration(path.snap_counts[0].copy()),
                          problem.partition)
    start = np.einsum("qik,ik->q", tracked.pairings, z0.values)
    mp = MartingalePath(times, values, comp, start, list(tracked.labels))
    if np.max(np.abs(mp.values[0])) != 0.0:
        raise AnalysisError("martingale must start at zero")
    return mp


# ---------------------------------------------------------------------------
# Ito isometry


@dataclass
class IsometryReport:
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    residual: float
    combined_se: float
    paired_se: float
    z_score: float
    replicates: int

    def within(self, n_se: float = 3.0) -> bool:
        return abs(self.residual) <= n_se * self.combined_se


def _ito_worker(idx, initial, T, problem, tracked, seed):
    _path, stats = simulate(initial.copy(), T, problem, seed=seed, stream=idx,
                            cadence=2, track=tracked)
    return stats.martingale_T.copy(), stats.gn_integral.copy()


def ito_isometry_residual(problem: FlowProblem, initial: HybridState,
                          phi: TestFunction, T: float, replicates: int,
                          seed: int = 0, workers: int = 1) -> IsometryReport:
    """Two-sided Monte Carlo check of E<Phi, M(T)>^2 = int E q_s(Phi, Phi) ds."""
    if replicates < 1000:
        raise ValidationError("the isometry estimator needs at least 10^3 replicates")
    tracked = tracked_functions([phi], problem.partition)
    out = ensemble.run_replicates(_ito_worker, replicates, workers,
                                  initial=initial, T=T, problem=problem,
                                  tracked=tracked, seed=seed)
    m_T = np.array([o[0][0] for o in out])
    gn = np.array([o[1][0] for o in out])
    lhs_samples = m_T * m_T
    lhs = float(np.mean(lhs_samples))
    rhs = float(np.mean(gn))
    lhs_se = float(np.std(lhs_samples, ddof=1) / np.sqrt(replicates))
    rhs_se = float(np.std(gn, ddof=1) / np.sqrt(replicates))
    diff = lhs_samples - gn
    paired_se = float(np.std(diff, ddof=1) / np.sqrt(replicates))
    combined = math.hypot(lhs_se, rhs_se)
    residual = lhs - rhs
    z = residual / combined if combined > 0 else 0.0
    return IsometryReport(lhs, lhs_se, rhs, rhs_se, residual, combined,
                          paired_se, z, replicates)


# ---------------------------------------------------------------------------
# ladder condition diagnostics


@dataclass
class LevelDiagnostics:
    """Raw per-level material for the asymptotic-condition diagnostics."""

    label: str
    alpha: float
    delta_plus: float
    ell_minus: int
    T: float
    trace_integrals: np.ndarray      # (R,) per-replicate int Lambda E||dz||^2 dt
    c2_integrals: np.ndarray         # (R,) per-replicate int ||drift - F|| dt
    max_pairings: np.ndarray         # (R, nphi) per-replicate max |<Phi, dz>|
    jump_bound: np.ndarray           # (nphi,) analytic per-event pairing bound
    h1_integrals: np.ndarray         # (R,) per-replicate int ||u||_H1^2 dt
    gn_integrals: np.ndarray = None  # (R,) basis-summed int <Phi, Gn Phi> dt


@dataclass
class DiagnosticsReport:
    rows: list
    verdicts: dict


def _mean_se(x: np.ndarray):
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return math.nan, math.nan
    se = float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0
    return float(np.mean(x)), se


def _trend(values, decreasing=True) -> str:
    v = [x for x in values if np.isfinite(x)]
    if len(v) < 2:
        return "single-level"
    ok = all(b < a for a, b in zip(v, v[1:])) if decreasing else \
        all(b > a for a, b in zip(v, v[1:]))
    return "pass" if ok else "fail"


def condition_diagnostics(levels: list) -> DiagnosticsReport:
    """Empirical per-level reports behind the limit-theorem conditions.

    (i) the second-moment integral and its alpha-scaled version, (ii) the
    generator-vs-F residual, (iii) rescaled jump-height maxima against the
    analytic per-event bound; each with a monotone-trend verdict across the
    ladder.
    """
    rows = []
    trace_means, c2_means, scaled_traces = [], [], []
    jump_ok = True
    for lv in levels:
        if len(lv.trace_integrals) == 0:
            rows.append({"level": lv.label, "metric": "incomplete", "estimate": math.nan,
                         "stderr": math.nan, "n": 0})
            trace_means.append(math.nan)
            c2_means.append(math.nan)
            scaled_traces.append(math.nan)
            continue
        tmean, tse = _mean_se(lv.trace_integrals)
        cmean, cse = _mean_se(lv.c2_integrals)
        hmean, hse = _mean_se(lv.h1_integrals)
        n = len(lv.trace_integrals)
        rows.append({"level": lv.label, "metric": "second_moment_integral",
                     "estimate": tmean, "stderr": tse, "n": n})
        rows.append({"level": lv.label, "metric": "generator_residual_L1",
                     "estimate": cmean, "stderr": cse, "n": n})
        rows.append({"level": lv.label, "metric": "h1_budget_integral",
                     "estimate": hmean, "stderr": hse, "n": n})
        # D1 supremum candidate: dual-space quantities only through test
        # function pairings, so the scaled second moment is the alpha-scaled
        # basis sum of the diagonal quadratic forms
        if lv.gn_integrals is not None and len(lv.gn_integrals):
            gmean, gse = _mean_se(lv.gn_integrals)
            rows.append({"level": lv.label, "metric": "alpha_scaled_second_moment",
                         "estimate": lv.alpha * gmean, "stderr": lv.alpha * gse, "n": n})
            scaled = lv.alpha * gmean
        else:
            rows.append({"level": lv.label, "metric": "alpha_scaled_second_moment",
                         "estimate": lv.alpha * tmean, "stderr": lv.alpha * tse, "n": n})
            scaled = lv.alpha * tmean
        if lv.max_pairings.size:
            observed = math.sqrt(lv.alpha) * np.max(lv.max_pairings, axis=0)
            bound = math.sqrt(lv.alpha) * lv.jump_bound
            worst = float(np.max(observed - bound))
            rows.append({"level": lv.label, "metric": "rescaled_jump_max",
                         "estimate": float(np.max(observed)), "stderr": 0.0, "n": n})
            rows.append({"level": lv.label, "metric": "rescaled_jump_bound",
                         "estimate": float(np.max(bound)), "stderr": 0.0, "n": n})
            if worst > 1e-12:
                jump_ok = False
        trace_means.append(tmean)
        c2_means.append(cmean)
        scaled_traces.append(scaled)
    finite_scaled = [x for x in scaled_traces if np.isfinite(x)]
    verdicts = {
        "second_moment_to_zero": _trend(trace_means, decreasing=True),
        "generator_residual_to_zero": _trend(c2_means, decreasing=True),
        "alpha_scaled_bounded": "pass" if finite_scaled and
            max(finite_scaled) <= 4.0 * min(finite_scaled) else
            ("single-level" if len(finite_scaled) < 2 else "fail"),
        "jump_bound_respected": "pass" if jump_ok else "fail",
    }
    return DiagnosticsReport(rows, verdicts)


def analytic_jump_bound(tracked_funcs, problem: FlowProblem) -> np.ndarray:
    """Per-event bound on |<Phi, dz>|: max over events of
    (sup|phi_i| + sup|phi_j|) |D_k| / l(k)."""
    part = problem.partition
    out = np.zeros(len(tracked_funcs))
    occ = part.nonempty
    for q, tf in enumerate(tracked_funcs):
        sup = np.max(np.abs(tf.values), axis=1)
        best = 0.0
        for p in range(problem.n_pairs):
            i, j = int(problem.pis[p]), int(problem.pjs[p])
            cand = np.max((sup[i] + sup[j]) * part.lengths[occ] / part.channels[occ])
            best = max(best, float(cand))
        out[q] = best
    return out
