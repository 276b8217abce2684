"""Deterministic fluid limit: membrane PDE coupled to the local kinetics ODE field.

The membrane advances with the same IMEX Crank-Nicolson step as the hybrid
flow; the occupancy field p uses explicit Heun (or plain Euler, used when
comparing against the Langevin scheme at zero noise).  Invariant drift is
monitored, never silently repaired.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import SchemeError, ValidationError
from .kinetics import ChannelKinetics
from .model import SpatialGrid
from .pde import EllipticOperator

_SUM_DRIFT_TOL = 1e-8


@dataclass
class LimitState:
    u: np.ndarray        # (N,)
    p: np.ndarray        # (m, N)
    t: float = 0.0

    def copy(self) -> "LimitState":
        return LimitState(self.u.copy(), self.p.copy(), self.t)


class LimitProblem:
    """Grid, operator and kinetics packed for the limit stepper."""

    def __init__(self, grid: SpatialGrid, operator: EllipticOperator,
                 kinetics: ChannelKinetics, dt_max: float = 1e-3,
                 bound_tol: float = 1e-9, p_integrator: str = "heun"):
        if p_integrator not in ("heun", "euler"):
            raise ValidationError(f"unknown p integrator {p_integrator!r}")
        self.grid = grid
        self.operator = operator
        self.kinetics = kinetics
        self.bound_tol = bound_tol
        self.p_integrator = p_integrator
        pairs = sorted(kinetics.rate_functions)
        _row, codes, params = kinetics.packed()
        self.pis = np.array([i for i, _ in pairs], dtype=np.int64) if pairs else np.zeros(0, np.int64)
        self.pjs = np.array([j for _, j in pairs], dtype=np.int64) if pairs else np.zeros(0, np.int64)
        self.codes = codes[: len(pairs)]
        self.params = params[: len(pairs)]
        self.g = np.ascontiguousarray(kinetics.g_on_grid(grid.N))
        self.E = np.ascontiguousarray(kinetics.E)
        # kinetics are non-stiff at bench scale; clip dt so qbar*dt <= 0.1
        self.dt_max = min(dt_max, 0.1 / kinetics.qbar) if kinetics.qbar > 0 else dt_max

    def kinetics_field(self, p: np.ndarray, u: np.ndarray) -> np.ndarray:
        """F_j(p, u) = inflow - outflow, nodewise, shape (m, N)."""
        out = np.empty_like(p)
        _kernels.kinetics_field_nodes(np.ascontiguousarray(p), np.ascontiguousarray(u),
                                      self.pis, self.pjs, self.codes, self.params, out)
        return out


def kinetics_vector_field(p: np.ndarray, u: np.ndarray, kinetics: ChannelKinetics) -> np.ndarray:
    """Standalone evaluator of the occupancy vector field F(p, u)."""
    pairs = sorted(kinetics.rate_functions)
    _row, codes, params = kinetics.packed()
    pis = np.array([i for i, _ in pairs], dtype=np.int64) if pairs else np.zeros(0, np.int64)
    pjs = np.array([j for _, j in pairs], dtype=np.int64) if pairs else np.zeros(0, np.int64)
    p = np.ascontiguousarray(p, dtype=float)
    out = np.empty_like(p)
    _kernels.kinetics_field_nodes(p, np.ascontiguousarray(u, dtype=float),
                                  pis, pjs, codes[: len(pairs)], params[: len(pairs)], out)
    return out


def step_limit(state: LimitState, dt: float, problem: LimitProblem) -> LimitState:
    """One coupled IMEX step: implicit diffusion, explicit reaction and kinetics."""
    if dt <= 0 or dt > problem.dt_max * (1 + 1e-12):
        raise ValidationError(f"dt={dt} outside (0, {problem.dt_max}]")
    u, p = state.u, state.p
    F1 = problem.kinetics_field(p, u)
    react = np.empty_like(u)
    _kernels.reaction_pnodes(u, np.ascontiguousarray(p), problem.g, problem.E, react)
    u_new = np.empty_like(u)
    _kernels.cn_apply(u, react, problem.operator.a, problem.grid.h, dt, u_new)
    if problem.p_integrator == "heun":
        p_pred = p + dt * F1
        F2 = problem.kinetics_field(p_pred, u_new)
        p_new = p + (0.5 * dt) * (F1 + F2)
    else:
        p_new = p + dt * F1

    sums = p_new.sum(axis=0)
    drift = float(np.max(np.abs(sums - 1.0)))
    if drift > _SUM_DRIFT_TOL:
        raise SchemeError(f"occupancy mass drift {drift:.3e} beyond {_SUM_DRIFT_TOL}")
    lo = problem.kinetics.u_minus - problem.bound_tol
    hi = problem.kinetics.u_plus + problem.bound_tol
    if np.min(u_new) < lo or np.max(u_new) > hi:
        worst = max(problem.kinetics.u_minus - np.min(u_new),
                    np.max(u_new) - problem.kinetics.u_plus)
        raise SchemeError(f"membrane bound violated by {worst:.3e} at t={state.t + dt}")
    return LimitState(u_new, p_new, state.t + dt)


@dataclass
class LimitTrajectory:
    times: np.ndarray    # (S,)
    u: np.ndarray        # (S, N)
    p: np.ndarray        # (S, m, N)
    p_excursion: float   # worst p value outside [0, 1] (monitored, not repaired)

    def state_at(self, index: int) -> LimitState:
        return LimitState(self.u[index].copy(), self.p[index].copy(), float(self.times[index]))

    def export_jsonl(self, path, config_hash: str = ""):
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "header", "schema": 1, "trajectory": "deterministic",
                                 "config_hash": config_hash}, sort_keys=True) + "\n")
            for s, t in enumerate(self.times):
                fh.write(json.dumps({"kind": "snapshot", "t": float(t),
                                     "u": self.u[s].tolist(),
                                     "p": self.p[s].tolist()}, sort_keys=True) + "\n")


def solve_limit(initial: LimitState, T: float, problem: LimitProblem,
                cadence: int = 51) -> LimitTrajectory:
    """Dense-output solve on [t0, t0+T] at ``cadence`` evenly spaced times.

    Steps advance by min(dt_max, time to next output), matching the hybrid
    flow's sub-stepping rule so degenerate comparisons align exactly.
    """
    if T < 0:
        raise ValidationError("T must be non-negative")
    state = initial.copy()
    times = initial.t + np.linspace(0.0, T, cadence)
    S = len(times)
    out_u = np.zeros((S, len(initial.u)))
    out_p = np.zeros((S,) + initial.p.shape)
    out_u[0] = state.u
    out_p[0] = state.p
    excursion = float(max(np.max(state.p - 1.0), np.max(-state.p), 0.0))
    for s in range(1, S):
        target = times[s]
        while state.t < target - 1e-15 * max(1.0, abs(target)):
            dt = min(problem.dt_max, target - state.t)
            state = step_limit(state, dt, problem)
            excursion = max(excursion, float(max(np.max(state.p - 1.0), np.max(-state.p), 0.0)))
        state.t = target
        out_u[s] = state.u
        out_p[s] = state.p
    return LimitTrajectory(times, out_u, out_p, excursion)


@dataclass
class DivergenceReport:
    """Measured exponential divergence rate between two nearby solutions."""

    initial_gap: float
    final_gap: float
    rate: float


def measure_divergence(a: LimitState, b: LimitState, T: float,
                       problem: LimitProblem, cadence: int = 21) -> DivergenceReport:
    """Diagnostic Gronwall-type rate: gap(T) <= gap(0) * exp(rate * T)."""
    ta = solve_limit(a, T, problem, cadence)
    tb = solve_limit(b, T, problem, cadence)
    h = problem.grid.h

    def gap(s):
        du = ta.u[s] - tb.u[s]
        dp = ta.p[s] - tb.p[s]
        return np.sqrt(h * (np.sum(du * du) + np.sum(dp * dp)))

    g0, gT = gap(0), gap(cadence - 1)
    if g0 <= 0:
        raise ValidationError("initial states must differ")
    rate = float(np.log(max(gT, 1e-300) / g0) / T)
    return DivergenceReport(float(g0), float(gT), rate)
