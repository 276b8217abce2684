"""Membrane PDE between jumps: IMEX Crank-Nicolson diffusion, explicit reaction.

The spatial discretization is second order (cell-centered, Dirichlet ghost
values); the time stepping is first order overall because the reaction is
explicit.  One accepted step must keep the membrane inside the pointwise
window [u_minus - tol, u_plus + tol]; anything beyond tol is treated as a
scheme bug, not roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import NumericsError, SchemeError, ValidationError
from .kinetics import ChannelKinetics
from .model import CoordinateField, Partition, SpatialGrid


@dataclass(frozen=True)
class MembraneState:
    u: np.ndarray
    t: float = 0.0

    def with_(self, u=None, t=None) -> "MembraneState":
        return MembraneState(self.u if u is None else u, self.t if t is None else t)


@dataclass(frozen=True)
class EllipticOperator:
    """Scalar diffusion a(x) u_xx with homogeneous Dirichlet boundaries."""

    a: np.ndarray
    min_coefficient: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        if np.any(~np.isfinite(self.a)):
            raise ValidationError("diffusion coefficient must be finite")
        if np.min(self.a) < self.min_coefficient:
            raise ValidationError(
                f"strong ellipticity violated: min a = {np.min(self.a)} "
                f"< {self.min_coefficient}"
            )

    @staticmethod
    def constant(value: float, grid: SpatialGrid, min_coefficient: float = 1e-12):
        return EllipticOperator(np.full(grid.N, float(value)), min_coefficient)


@dataclass(frozen=True)
class ReactionTerm:
    """Nodewise reaction sum_i g_i(x) z_i(x) (E_i - u(x))."""

    g: np.ndarray  # (m, N)
    E: np.ndarray  # (m,)

    def __call__(self, u: np.ndarray, z_grid: np.ndarray) -> np.ndarray:
        out = np.empty_like(u)
        _kernels.reaction_pnodes(u, np.ascontiguousarray(z_grid), self.g, self.E, out)
        return out

    @staticmethod
    def from_kinetics(kinetics: ChannelKinetics, grid: SpatialGrid) -> "ReactionTerm":
        return ReactionTerm(np.ascontiguousarray(kinetics.g_on_grid(grid.N)),
                            np.ascontiguousarray(kinetics.E))


@dataclass(frozen=True)
class SolverSettings:
    """Time-stepping policy for the flow map.

    dt = min(dt_max, safety / (hazard_samples * Lambda)) so each expected
    inter-jump interval carries at least ``hazard_samples`` hazard samples.
    """

    dt_max: float = 5e-4
    safety: float = 0.9
    hazard_samples: int = 20
    bound_tol: float = 1e-9
    h1_budget: float | None = None

    def __post_init__(self):
        if self.dt_max <= 0 or not (0 < self.safety <= 1) or self.hazard_samples < 1:
            raise ValidationError("invalid solver settings")

    def dt_policy(self, lam: float) -> float:
        if lam > 0.0:
            return min(self.dt_max, self.safety / (self.hazard_samples * lam))
        return self.dt_max


class FlowProblem:
    """Packs grid, operator, kinetics and partition arrays for the kernels."""

    def __init__(self, grid: SpatialGrid, operator: EllipticOperator,
                 kinetics: ChannelKinetics, partition: Partition,
                 settings: SolverSettings):
        if operator.a.shape != (grid.N,):
            raise ValidationError("diffusion coefficient does not match the grid")
        self.grid = grid
        self.operator = operator
        self.kinetics = kinetics
        self.partition = partition
        self.settings = settings
        self.reaction = ReactionTerm.from_kinetics(kinetics, grid)
        pair_row, codes, params = kinetics.packed()
        pairs = sorted(kinetics.rate_functions)
        self.pis = np.array([i for i, _ in pairs], dtype=np.int64) if pairs else np.zeros(0, np.int64)
        self.pjs = np.array([j for _, j in pairs], dtype=np.int64) if pairs else np.zeros(0, np.int64)
        self.codes = codes[: len(pairs)]
        self.params = params[: len(pairs)]
        self.channels_f = partition.channels.astype(float)
        self.comp_w = partition.lengths
        # thinning / regularity bound: sum_k l(k) * m(m-1) * qbar
        self.lambda_bar = float(partition.total_channels) * kinetics.m * (kinetics.m - 1) * kinetics.qbar
        self._state_bound = kinetics.outgoing_bound_per_state()
        # empty compartments divide by 1 so their occupancy stays exactly 0
        self._channel_div = np.where(partition.channels > 0, partition.channels, 1)

    @property
    def n_pairs(self) -> int:
        return len(self.pis)

    def config_rate_bound(self, counts: np.ndarray) -> float:
        """Exact upper bound on Lambda for this channel configuration."""
        return float(self._state_bound @ counts.sum(axis=1))

    def occupancy_values(self, counts: np.ndarray) -> np.ndarray:
        """counts / l(k) without object construction (hot-path helper);
        bitwise identical to the coordinate_field values."""
        return counts / self._channel_div

    def empty_tracking(self):
        if not hasattr(self, "_empty_tracking"):
            zero3 = np.zeros((0, max(self.n_pairs, 1), self.partition.n_compartments))
            self._empty_tracking = (zero3, zero3, zero3)
        return self._empty_tracking

    def run_segment(self, u, t, t_limit, e_target, H0, counts, z_values,
                    track=None, want_c2=False, acc=None, cp_int=None, gn_int=None,
                    haz_buffers=None):
        """Single advance_segment call; mutates u (and accumulators) in place."""
        if track is None:
            dP, dP2l2, dPl = self.empty_tracking()
        else:
            dP, dP2l2, dPl = track
        nphi = dP.shape[0]
        if acc is None:
            acc = np.zeros(4)
        if cp_int is None:
            cp_int = np.zeros(nphi)
        if gn_int is None:
            gn_int = np.zeros(nphi)
        rates_out = np.zeros((max(self.n_pairs, 1), self.partition.n_compartments))
        if haz_buffers is None:
            haz_t = np.zeros(0)
            haz_lam = np.zeros(0)
            record = 0
        else:
            haz_t, haz_lam = haz_buffers
            record = 1
        st = self.settings
        status, t_new, H, lam, viol, nhz = _kernels.advance_segment(
            u, t, t_limit, e_target, H0,
            counts, z_values, self.channels_f,
            self.partition.cell_offsets, self.partition.node_to_comp, self.comp_w,
            self.operator.a, self.grid.h, st.dt_max, st.safety, st.hazard_samples,
            self.kinetics.u_minus, self.kinetics.u_plus, st.bound_tol,
            self.reaction.g, self.reaction.E,
            self.pis, self.pjs, self.codes, self.params,
            dP, dP2l2, dPl,
            1 if want_c2 else 0,
            acc, cp_int, gn_int,
            rates_out,
            haz_t, haz_lam, record)
        return status, t_new, H, lam, viol, nhz, rates_out


def _check_status(status, viol, t):
    if status == _kernels.STATUS_BOUND:
        if not np.isfinite(viol):
            raise NumericsError(f"non-finite membrane value at t={t}")
        raise SchemeError(
            f"pointwise bound violated by {viol:.3e} at t={t} "
            "(beyond the 1e-9 roundoff tolerance)"
        )


def step_flow(state: MembraneState, z: CoordinateField, dt: float,
              problem: FlowProblem) -> MembraneState:
    """Advance the membrane by one IMEX step with the channel state frozen.

    dt must not exceed the configured dt_max; the step preserves the
    pointwise bounds of the initial data up to the configured tolerance.
    """
    if dt < 0 or dt > problem.settings.dt_max * (1 + 1e-12):
        raise ValidationError(f"dt={dt} exceeds dt_max={problem.settings.dt_max}")
    if np.any(~np.isfinite(state.u)):
        raise NumericsError("non-finite input to the tridiagonal solve")
    u = np.array(state.u, dtype=float)
    react = np.empty_like(u)
    out = np.empty_like(u)
    _kernels.reaction_zcomp(u, z.values, problem.partition.node_to_comp,
                            problem.reaction.g, problem.reaction.E, react)
    _kernels.cn_apply(u, react, problem.operator.a, problem.grid.h, dt, out)
    if np.any(~np.isfinite(out)):
        raise NumericsError(f"tridiagonal solve produced non-finite values at t={state.t}")
    lo = problem.kinetics.u_minus - problem.settings.bound_tol
    hi = problem.kinetics.u_plus + problem.settings.bound_tol
    if np.min(out) < lo or np.max(out) > hi:
        worst = max(problem.kinetics.u_minus - np.min(out), np.max(out) - problem.kinetics.u_plus)
        raise SchemeError(
            f"pointwise bound violated by {worst:.3e} at t={state.t + dt} "
            "(beyond the 1e-9 roundoff tolerance)"
        )
    return MembraneState(out, state.t + dt)


@dataclass
class HazardSamples:
    """Per-substep total-rate samples recorded along the flow."""

    times: np.ndarray
    rates: np.ndarray

    def cumulative(self) -> np.ndarray:
        """Trapezoid cumulative hazard at the sample times."""
        if len(self.times) == 0:
            return np.zeros(0)
        increments = 0.5 * np.diff(self.times) * (self.rates[1:] + self.rates[:-1])
        return np.concatenate([[0.0], np.cumsum(increments)])


def integrate_to(state: MembraneState, z: CoordinateField, t_end: float,
                 problem: FlowProblem, counts: np.ndarray | None = None):
    """Flow the membrane to t_end, recording hazard samples per substep.

    ``counts`` supplies the channel configuration whose rates define the
    hazard; without it the hazard is evaluated for the configuration
    implied by z (scaled by channel counts of the partition).  Returns
    (state at t_end, HazardSamples).  Deterministic for fixed inputs.
    """
    if t_end < state.t:
        raise ValidationError("t_end must not precede the current time")
    if counts is None:
        counts = np.rint(z.values * problem.partition.channels).astype(np.int64)
    if t_end == state.t:
        return state, HazardSamples(np.zeros(0), np.zeros(0))
    lam_bound = problem.config_rate_bound(counts)
    dt_min = problem.settings.dt_policy(lam_bound if lam_bound > 0 else 0.0)
    n_max = int(np.ceil((t_end - state.t) / dt_min)) + 8
    haz_t = np.zeros(n_max)
    haz_lam = np.zeros(n_max)
    u = np.array(state.u, dtype=float)
    status, t, _H, _lam, viol, nhz, _rt = problem.run_segment(
        u, state.t, t_end, np.inf, 0.0, counts, z.values,
        haz_buffers=(haz_t, haz_lam))
    _check_status(status, viol, t)
    return MembraneState(u, t), HazardSamples(haz_t[:nhz].copy(), haz_lam[:nhz].copy())


def l2_norm(u: np.ndarray, grid: SpatialGrid) -> float:
    """Midpoint-rule L2 norm of a grid function."""
    l2, _ = _kernels.h1_l2_sq(np.asarray(u, dtype=float), grid.h)
    return float(np.sqrt(l2))


def h1_seminorm(u: np.ndarray, grid: SpatialGrid) -> float:
    """Forward-difference H1 seminorm with zero Dirichlet extension."""
    _, semi = _kernels.h1_l2_sq(np.asarray(u, dtype=float), grid.h)
    return float(np.sqrt(semi))
