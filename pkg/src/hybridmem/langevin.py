"""Euler-Maruyama scheme for the Langevin approximation.

The membrane equation carries no noise; the occupancy field P gains a
Gaussian increment driven by the nodewise square root of the limit
covariance matrix, scaled by 1/sqrt(alpha_n).  P may leave [0, 1]; the
excursions are reported, never clipped.  Rate arguments inside the noise
covariance use max(P, 0) so the matrix stays positive semi-definite; the
drift always sees the raw P.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import NumericsError, ValidationError
from .kinetics import ChannelKinetics
from .limit import LimitProblem
from .martingale import covariance_matrices
from .pdmp import make_rng

_EIG_HARD_FLOOR = -1e-12


@dataclass
class LangevinState:
    u: np.ndarray      # (N,)
    P: np.ndarray      # (m, N)
    t: float = 0.0

    def copy(self) -> "LangevinState":
        return LangevinState(self.u.copy(), self.P.copy(), self.t)


class NoiseKernel:
    """Nodewise covariance matrices D(x) and their non-negative square roots.

    D is assembled from clamped occupancies p* = max(P, 0):
    for every state pair, s_ij = p*_i q_ij(u) + p*_j q_ji(u) contributes
    +s to both diagonal entries and -s to both off-diagonal entries, so
    D(x) annihilates the all-ones direction.  The square root comes from a
    symmetric eigendecomposition with eigenvalues below -1e-12 treated as
    PSD violations, small negatives floored to zero, and rounding-level
    magnitudes zeroed so the mass direction stays noiseless.
    """

    def __init__(self, u: np.ndarray, P: np.ndarray, kinetics: ChannelKinetics,
                 alpha: float):
        if alpha <= 0:
            raise ValidationError("alpha must be positive (use math.inf for zero noise)")
        self.alpha = float(alpha)
        self.scale = 0.0 if math.isinf(alpha) else 1.0 / math.sqrt(alpha)
        p_star = np.maximum(np.asarray(P, dtype=float), 0.0)
        self.clamp_active = bool(np.any(np.asarray(P) < 0.0))
        self.D = covariance_matrices(np.asarray(u, dtype=float), p_star, kinetics)
        D = self.D

        w, V = np.linalg.eigh(D)
        if np.any(~np.isfinite(w)):
            raise NumericsError("eigendecomposition of the noise covariance failed")
        wmin = float(np.min(w))
        if wmin < _EIG_HARD_FLOOR:
            node = int(np.argmin(np.min(w, axis=1)))
            raise NumericsError(
                f"noise covariance not PSD: eigenvalue {wmin:.3e} at node {node}")
        # negatives in (-1e-12, 0) floored; rounding-scale magnitudes zeroed so
        # the all-ones kernel direction carries exactly no noise
        floor = 64.0 * np.finfo(float).eps * np.maximum(1.0, np.max(w, axis=1, keepdims=True))
        w = np.where(w <= floor, 0.0, w)
        self.sqrtD = np.einsum("nik,nk,njk->nij", V, np.sqrt(w), V)

    def increment(self, xi: np.ndarray, dt: float, h: float) -> np.ndarray:
        """Noise increment scale/sqrt(alpha-free) * sqrtD xi * sqrt(dt/h), shape (m, N)."""
        eta = np.einsum("nij,jn->in", self.sqrtD, xi)
        return (self.scale * math.sqrt(dt / h)) * eta


class LangevinProblem(LimitProblem):
    """Limit problem plus the fluctuation scale; drift stepped by plain Euler."""

    def __init__(self, grid, operator, kinetics, alpha: float, dt_max: float = 1e-3,
                 bound_tol: float = 1e-9):
        super().__init__(grid, operator, kinetics, dt_max=dt_max,
                         bound_tol=bound_tol, p_integrator="euler")
        if not (alpha > 0):
            raise ValidationError("alpha_n must be positive")
        self.alpha = float(alpha)


def step_langevin(state: LangevinState, dt: float, problem: LangevinProblem,
                  rng: np.random.Generator) -> LangevinState:
    """One Euler-Maruyama step; returns the new state.

    u: Crank-Nicolson diffusion with explicit reaction from the raw P.
    P: P + F(P, u) dt + (1/sqrt(alpha)) sqrtD(x) xi sqrt(dt/h).
    """
    if dt <= 0 or dt > problem.dt_max * (1 + 1e-12):
        raise ValidationError(f"dt={dt} outside (0, {problem.dt_max}]")
    u, P = state.u, state.P
    m, N = P.shape
    F = problem.kinetics_field(P, u)
    react = np.empty_like(u)
    _kernels.reaction_pnodes(u, np.ascontiguousarray(P), problem.g, problem.E, react)
    u_new = np.empty_like(u)
    _kernels.cn_apply(u, react, problem.operator.a, problem.grid.h, dt, u_new)

    kernel = NoiseKernel(u, P, problem.kinetics, problem.alpha)
    xi = rng.standard_normal((m, N))
    P_new = P + dt * F + kernel.increment(xi, dt, problem.grid.h)
    return LangevinState(u_new, P_new, state.t + dt)


@dataclass
class LangevinTrajectory:
    times: np.ndarray
    u: np.ndarray       # (S, N)
    p: np.ndarray       # (S, m, N)
    p_excursion: float  # worst excursion of P outside [0, 1]
    clamp_steps: int    # steps on which the covariance clamp was active

    def export_jsonl(self, path, config_hash: str = ""):
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "header", "schema": 1, "trajectory": "langevin",
                                 "config_hash": config_hash}, sort_keys=True) + "\n")
            for s, t in enumerate(self.times):
                fh.write(json.dumps({"kind": "snapshot", "t": float(t),
                                     "u": self.u[s].tolist(),
                                     "p": self.p[s].tolist()}, sort_keys=True) + "\n")


def solve_langevin(initial: LangevinState, T: float, problem: LangevinProblem,
                   rng: np.random.Generator | None = None, seed: int = 0,
                   stream: int = 0, cadence: int = 51) -> LangevinTrajectory:
    """One ensemble member on [t0, t0+T] at the shared output cadence."""
    if T < 0:
        raise ValidationError("T must be non-negative")
    if rng is None:
        rng = make_rng(seed, stream)
    state = initial.copy()
    times = initial.t + np.linspace(0.0, T, cadence)
    S = len(times)
    out_u = np.zeros((S, len(initial.u)))
    out_p = np.zeros((S,) + initial.P.shape)
    out_u[0] = state.u
    out_p[0] = state.P
    excursion = float(max(np.max(state.P - 1.0), np.max(-state.P), 0.0))
    clamp_steps = 0
    for s in range(1, S):
        target = times[s]
        while state.t < target - 1e-15 * max(1.0, abs(target)):
            dt = min(problem.dt_max, target - state.t)
            if np.any(state.P < 0.0):
                clamp_steps += 1
            state = step_langevin(state, dt, problem, rng)
            excursion = max(excursion, float(max(np.max(state.P - 1.0), np.max(-state.P), 0.0)))
        state.t = target
        out_u[s] = state.u
        out_p[s] = state.P
    return LangevinTrajectory(times, out_u, out_p, excursion, clamp_steps)
