"""Exact simulation of the hybrid process.

Between jumps the membrane follows the deterministic flow; jump times come
from the state-dependent survival law via integrated-hazard inversion
(default) or thinning; the post-jump kernel moves a single channel between
states.  One RNG stream per replicate keeps ensembles reproducible and
embarrassingly parallel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import InternalError, KineticsError, NumericsError, SchemeError, ValidationError
from .model import (ChannelConfiguration, CoordinateField, Partition, RateTable,
                    coordinate_field, jump_event_rates)
from .pde import FlowProblem, MembraneState, _check_status


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; (seed, stream) fully determines the draws."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,))))


def _exp_draw(rng) -> float:
    """Strictly positive exponential clock (0.0 has probability ~2^-53 but
    would stall the strict increase of jump times)."""
    e = float(rng.standard_exponential())
    while e <= 0.0:
        e = float(rng.standard_exponential())
    return e


@dataclass
class HybridState:
    membrane: MembraneState
    config: ChannelConfiguration

    def z(self, partition: Partition) -> CoordinateField:
        return coordinate_field(self.config, partition)

    def copy(self) -> "HybridState":
        return HybridState(MembraneState(self.membrane.u.copy(), self.membrane.t),
                           self.config.copy())


@dataclass
class HybridPath:
    """Jump log plus state snapshots at the output cadence."""

    jump_times: np.ndarray          # (nj,)
    jump_events: np.ndarray         # (nj, 3) int: compartment, from-state, to-state
    snap_times: np.ndarray          # (S,)
    snap_u: np.ndarray              # (S, N)
    snap_counts: np.ndarray         # (S, m, K) int
    terminal: HybridState
    seed: int
    stream: int
    config_hash: str = ""

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def validate(self):
        if self.n_jumps and np.any(np.diff(self.jump_times) <= 0):
            raise ValidationError("jump times must strictly increase")
        sums = self.snap_counts.sum(axis=1)
        if np.any(sums != sums[0]):
            raise ValidationError("channel conservation violated in snapshots")

    def snap_z(self, partition: Partition) -> np.ndarray:
        """Occupancy fractions at snapshot times, shape (S, m, K)."""
        occ = partition.channels > 0
        z = np.zeros(self.snap_counts.shape, dtype=float)
        z[:, :, occ] = self.snap_counts[:, :, occ] / partition.channels[occ]
        return z

    def export_jsonl(self, path, partition: Partition):
        """Line-oriented export: header, one record per jump and snapshot."""
        records = [{"kind": "header", "schema": 1, "config_hash": self.config_hash,
                    "seed": self.seed, "stream": self.stream}]
        for t, (k, i, j) in zip(self.jump_times, self.jump_events):
            records.append({"kind": "jump", "t": float(t), "k": int(k),
                            "i": int(i), "j": int(j)})
        zs = self.snap_z(partition)
        for s, t in enumerate(self.snap_times):
            records.append({"kind": "snapshot", "t": float(t),
                            "u": self.snap_u[s].tolist(),
                            "z": zs[s].tolist()})
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class PathStats:
    """Per-path accumulators produced alongside simulation.

    All time integrals are jump-aligned trapezoid sums on the flow substep
    grid.  Martingale values refer to the tracked test functions, in order.
    """

    martingale_T: np.ndarray        # (nphi,) <Phi, M(T)>
    jump_sum: np.ndarray            # (nphi,) sum of jump increments
    compensator_T: np.ndarray       # (nphi,) integral of <Phi, drift>
    gn_integral: np.ndarray         # (nphi,) integral of <Phi, Gn Phi>
    trace_integral: float           # integral of Lambda * E_mu ||dz||^2
    h1_integral: float              # integral of ||u||_{H1}^2
    c2_integral: float              # integral of ||drift - F(z, u)||_{L2}
    n_jumps: int
    max_jump_pairing: np.ndarray    # (nphi,) max_t |<Phi, dz>|
    max_jump_norm: float            # max_t ||dz||_E (metric norm)
    martingale_snaps: np.ndarray    # (S, nphi) martingale value at snapshots


@dataclass
class TrackedFunctions:
    """Pairing tables of test functions against compartment indicators."""

    pairings: np.ndarray     # (nphi, m, K): <phi_qi, 1_{D_k}>
    labels: list

    @property
    def nphi(self) -> int:
        return self.pairings.shape[0]

    def tables(self, problem: FlowProblem):
        """(dP, dP2/l^2, dP/l) tables aligned with the kernel pair layout."""
        part = problem.partition
        P = max(problem.n_pairs, 1)
        K = part.n_compartments
        dP = np.zeros((self.nphi, P, K))
        for p in range(problem.n_pairs):
            i, j = int(problem.pis[p]), int(problem.pjs[p])
            dP[:, p, :] = self.pairings[:, j, :] - self.pairings[:, i, :]
        linv = np.zeros(K)
        occ = part.nonempty
        linv[occ] = 1.0 / part.channels[occ]
        dPl = dP * linv
        dP2l2 = dPl * dPl
        return np.ascontiguousarray(dP), np.ascontiguousarray(dP2l2), np.ascontiguousarray(dPl)


def _select_event(rates_flat: np.ndarray, total: float, r: float,
                  problem: FlowProblem) -> tuple:
    """Pick event index with probability rate/Lambda from a (P*K,) table."""
    cum = np.cumsum(rates_flat)
    idx = int(np.searchsorted(cum, r * total, side="right"))
    if idx >= len(rates_flat):
        if cum[-1] <= 0:
            raise InternalError("event selection on an all-zero rate table (stale table)")
        idx = len(rates_flat) - 1
    K = problem.partition.n_compartments
    p, k = divmod(idx, K)
    if p >= problem.n_pairs:
        raise InternalError("event selection index out of range (stale rate table)")
    return int(problem.pis[p]), int(problem.pjs[p]), k


def select_jump_event(rates: RateTable, rng: np.random.Generator) -> tuple:
    """Draw one event (k, i, j) with probability rate / Lambda."""
    if rates.total <= 0:
        raise ValidationError("event selection requires a positive total rate")
    flat = rates.rates.reshape(-1)
    cum = np.cumsum(flat)
    idx = int(np.searchsorted(cum, rng.random() * rates.total, side="right"))
    idx = min(idx, len(flat) - 1)
    K, m, _ = rates.rates.shape
    k, rest = divmod(idx, m * m)
    i, j = divmod(rest, m)
    if i == j or rates.rates[k, i, j] == 0.0:
        raise InternalError("selected a zero-rate event (stale rate table)")
    return k, i, j


def sample_post_jump(state: HybridState, rates: RateTable,
                     rng: np.random.Generator) -> ChannelConfiguration:
    """Draw the post-jump configuration from the kernel mu."""
    k, i, j = select_jump_event(rates, rng)
    new = state.config.copy()
    new.apply_event(k, i, j)
    return new


def sample_jump_time(state: HybridState, problem: FlowProblem,
                     rng: np.random.Generator, method: str = "integrated-hazard",
                     t_max: float = math.inf):
    """Draw the next jump time and the flowed membrane state at that time.

    Returns (tau, HybridState).  tau = +inf marks an absorbing
    configuration (no event can ever fire, decided from the rate bounds);
    with a finite t_max and no jump by then, tau = +inf with the state
    flowed to t_max.
    """
    if method not in ("integrated-hazard", "thinning"):
        raise ValidationError(f"unknown jump sampling method {method!r}")
    counts = state.config.counts
    if problem.config_rate_bound(counts) == 0.0:
        return math.inf, state.copy()
    if not math.isfinite(t_max):
        # integrate in expanding windows; the rate bound gives a finite
        # expected crossing time whenever rates can fire at all
        t_max_eff = state.membrane.t + 64.0 / max(problem.config_rate_bound(counts), 1e-12)
    else:
        t_max_eff = t_max

    z = state.z(problem.partition)
    if method == "integrated-hazard":
        e = float(rng.standard_exponential())
        if e <= 0.0:
            e = _exp_draw(rng)
        u = state.membrane.u.copy()
        t = state.membrane.t
        H = 0.0
        while True:
            status, t, H, _lam, viol, _n, _rt = problem.run_segment(
                u, t, t_max_eff, e, H, counts, z.values)
            _check_status(status, viol, t)
            if status == _kernels.STATUS_JUMP:
                return t, HybridState(MembraneState(u, t), state.config.copy())
            if math.isfinite(t_max):
                return math.inf, HybridState(MembraneState(u, t), state.config.copy())
            t_max_eff += t_max_eff - state.membrane.t
    else:
        return _thinning_jump(state, problem, rng, t_max_eff, finite_horizon=math.isfinite(t_max))


def _thinning_jump(state: HybridState, problem: FlowProblem, rng, t_max, finite_horizon):
    lam_bar = problem.lambda_bar
    if lam_bar <= 0:
        return math.inf, state.copy()
    z = state.z(problem.partition)
    counts = state.config.counts
    u = state.membrane.u.copy()
    t = state.membrane.t
    while True:
        proposal = t + _exp_draw(rng) / lam_bar
        if proposal > t_max:
            status, t, _H, _lam, viol, _n, _rt = problem.run_segment(
                u, t, t_max, math.inf, 0.0, counts, z.values)
            _check_status(status, viol, t)
            if finite_horizon:
                return math.inf, HybridState(MembraneState(u, t), state.config.copy())
            t_max += t_max - state.membrane.t
            continue
        status, t, _H, lam, viol, _n, _rt = problem.run_segment(
            u, t, proposal, math.inf, 0.0, counts, z.values)
        _check_status(status, viol, t)
        if lam > lam_bar * (1 + 1e-12):
            raise KineticsError(
                f"thinning bound violated: Lambda={lam} > bound={lam_bar}; "
                "declared rate bounds are wrong")
        if rng.random() <= lam / lam_bar:
            return t, HybridState(MembraneState(u, t), state.config.copy())


def simulate(initial: HybridState, T: float, problem: FlowProblem,
             rng: np.random.Generator | None = None, seed: int = 0, stream: int = 0,
             cadence: int = 51, track: TrackedFunctions | None = None,
             want_c2: bool = False, method: str = "integrated-hazard",
             config_hash: str = "") -> tuple:
    """Run the hybrid process on [t0, t0+T]; returns (HybridPath, PathStats).

    Fixed (seed, stream) produces a bit-identical path.  Snapshots are taken
    at ``cadence`` evenly spaced times including both endpoints; jumps are
    always logged exactly.
    """
    if T <= 0:
        raise ValidationError("T must be positive")
    if cadence < 2:
        raise ValidationError("cadence must include both endpoints (>= 2)")
    if rng is None:
        rng = make_rng(seed, stream)
    initial.config.validate_against(problem.partition)
    if method == "thinning":
        return _simulate_thinning(initial, T, problem, rng, seed, stream, cadence,
                                  track, want_c2, config_hash)

    part = problem.partition
    t0 = initial.membrane.t
    snap_times = t0 + np.linspace(0.0, T, cadence)
    u = initial.membrane.u.astype(float).copy()
    config = initial.config.copy()
    counts = config.counts
    z_values = problem.occupancy_values(counts)

    if track is None:
        tables = None
        nphi = 0
    else:
        tables = track.tables(problem)
        nphi = track.nphi

    acc = np.zeros(4)
    cp_int = np.zeros(nphi)
    gn_int = np.zeros(nphi)
    jump_sum = np.zeros(nphi)
    max_pair = np.zeros(nphi)
    max_dz = 0.0

    jt = []
    jev = []
    S = len(snap_times)
    N = len(u)
    snap_u = np.zeros((S, N))
    snap_counts = np.zeros((S, counts.shape[0], counts.shape[1]), dtype=np.int64)
    mart_snaps = np.zeros((S, nphi))
    snap_u[0] = u
    snap_counts[0] = counts
    next_snap = 1

    t = t0
    e = _exp_draw(rng)
    H = 0.0
    absorbing = problem.config_rate_bound(counts) == 0.0
    t_end = t0 + T

    comp_lengths = part.lengths
    channels = part.channels
    while t < t_end - 1e-15 * max(1.0, abs(t_end)):
        t_limit = snap_times[next_snap] if next_snap < S else t_end
        e_target = math.inf if absorbing else e
        status, t, H, _lam, viol, _n, rates_out = problem.run_segment(
            u, t, t_limit, e_target, H, counts, z_values,
            track=tables, want_c2=want_c2, acc=acc, cp_int=cp_int, gn_int=gn_int)
        try:
            _check_status(status, viol, t)
        except (SchemeError, NumericsError) as exc:
            raise type(exc)(f"{exc} [simulation time t={t}]") from exc

        if status == _kernels.STATUS_JUMP:
            total = float(np.sum(rates_out))
            if total <= 0:
                raise InternalError("hazard crossed with an all-zero rate table")
            i, j, k = _select_event(rates_out.reshape(-1), total, float(rng.random()), problem)
            config.apply_event(k, i, j)
            jt.append(t)
            jev.append((k, i, j))
            if nphi:
                inc = (track.pairings[:, j, k] - track.pairings[:, i, k]) / channels[k]
                jump_sum += inc
                np.maximum(max_pair, np.abs(inc), out=max_pair)
            dz = math.sqrt(2.0 * comp_lengths[k]) / channels[k]
            max_dz = max(max_dz, dz)
            z_values = problem.occupancy_values(counts)
            e = _exp_draw(rng)
            H = 0.0
            absorbing = problem.config_rate_bound(counts) == 0.0
        else:
            if next_snap < S and t >= snap_times[next_snap] - 1e-15 * max(1.0, t_end):
                snap_u[next_snap] = u
                snap_counts[next_snap] = counts
                if nphi:
                    mart_snaps[next_snap] = jump_sum - cp_int
                next_snap += 1

    while next_snap < S:
        snap_u[next_snap] = u
        snap_counts[next_snap] = counts
        if nphi:
            mart_snaps[next_snap] = jump_sum - cp_int
        next_snap += 1

    terminal = HybridState(MembraneState(u.copy(), t), config.copy())
    path = HybridPath(np.array(jt), np.array(jev, dtype=np.int64).reshape(-1, 3),
                      snap_times, snap_u, snap_counts, terminal, seed, stream, config_hash)
    stats = PathStats(
        martingale_T=jump_sum - cp_int, jump_sum=jump_sum.copy(), compensator_T=cp_int.copy(),
        gn_integral=gn_int.copy(), trace_integral=float(acc[0]), h1_integral=float(acc[1]),
        c2_integral=float(acc[2]), n_jumps=len(jt), max_jump_pairing=max_pair,
        max_jump_norm=max_dz, martingale_snaps=mart_snaps)
    return path, stats


def _simulate_thinning(initial, T, problem, rng, seed, stream, cadence, track,
                       want_c2, config_hash):
    """Thinning-based variant used for cross-validating the hazard inversion.

    Jump log and snapshots only; martingale accumulators are not maintained
    on this code path.
    """
    part = problem.partition
    state = initial.copy()
    t0 = state.membrane.t
    t_end = t0 + T
    snap_times = t0 + np.linspace(0.0, T, cadence)
    jt, jev = [], []
    S = len(snap_times)
    snap_u = np.zeros((S, len(state.membrane.u)))
    snap_counts = np.zeros((S,) + state.config.counts.shape, dtype=np.int64)
    snap_u[0] = state.membrane.u
    snap_counts[0] = state.config.counts
    filled = 1
    while True:
        tau, at = sample_jump_time(state, problem, rng, method="thinning", t_max=t_end)
        stop = min(tau, t_end)
        # replay the accepted stretch to land exactly on snapshot times
        z = state.z(part)
        u = state.membrane.u.copy()
        t = state.membrane.t
        while filled < S and snap_times[filled] <= stop + 1e-15:
            status, t, _H, _lam, viol, _n, _rt = problem.run_segment(
                u, t, snap_times[filled], math.inf, 0.0, state.config.counts, z.values)
            _check_status(status, viol, t)
            snap_u[filled] = u
            snap_counts[filled] = state.config.counts
            filled += 1
        if not math.isfinite(tau) or tau > t_end:
            break
        state = HybridState(at.membrane, state.config)
        rates = jump_event_rates(state, problem.kinetics, part)
        k, i, j = select_jump_event(rates, rng)
        new_config = state.config.copy()
        new_config.apply_event(k, i, j)
        state = HybridState(at.membrane, new_config)
        jt.append(tau)
        jev.append((k, i, j))
    while filled < S:
        snap_u[filled] = snap_u[filled - 1]
        snap_counts[filled] = snap_counts[filled - 1]
        filled += 1
    nphi = 0 if track is None else track.nphi
    path = HybridPath(np.array(jt), np.array(jev, dtype=np.int64).reshape(-1, 3),
                      snap_times, snap_u, snap_counts, state, seed, stream, config_hash)
    stats = PathStats(np.zeros(nphi), np.zeros(nphi), np.zeros(nphi), np.zeros(nphi),
                      0.0, 0.0, 0.0, len(jt), np.zeros(nphi), 0.0, np.zeros((S, nphi)))
    return path, stats
