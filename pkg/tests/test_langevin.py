import math

import numpy as np
import pytest

from hybridmem import (ChannelKinetics, EllipticOperator, LangevinProblem,
                       LangevinState, LimitState, NoiseKernel, RateFunction,
                       SpatialGrid, integrated_limit_G, limit_G, make_rng,
                       sine_mode, solve_langevin, solve_limit, step_langevin)
from hybridmem.errors import NumericsError, ValidationError


def _kin(m=2, tanh_rate=False):
    if m == 2:
        q12 = RateFunction("tanh", (1.0, 0.5, 1.0, 0.0)) if tanh_rate \
            else RateFunction("constant", (1.0,))
        return ChannelKinetics(2, {(0, 1): q12, (1, 0): RateFunction("constant", (1.0,))},
                               g=[0.0, 1.0], E=[0.0, 1.0])
    return ChannelKinetics(
        4, {(0, 1): RateFunction("constant", (0.9,)),
            (1, 0): RateFunction("constant", (0.8,)),
            (1, 2): RateFunction("constant", (0.7,)),
            (2, 1): RateFunction("constant", (1.1,)),
            (2, 3): RateFunction("constant", (0.25,)),
            (3, 2): RateFunction("constant", (0.5,))},
        g=[0.0, 0.0, 1.0, 0.0], E=[0.0, 0.0, 1.0, 0.0])


def _problem(N=32, alpha=100.0, m=2, dt=1e-3, tanh_rate=False):
    grid = SpatialGrid(1.0, N)
    kin = _kin(m, tanh_rate)
    return grid, LangevinProblem(grid, EllipticOperator.constant(1.0, grid), kin,
                                 alpha=alpha, dt_max=dt)


class TestNoiseKernel:
    def test_mass_direction_annihilated(self):
        rng = np.random.default_rng(1)
        for m in (2, 4):
            grid, prob = _problem(N=16, m=m)
            P = rng.dirichlet(np.ones(m), size=16).T.copy()
            u = rng.uniform(0, 1, 16)
            nk = NoiseKernel(u, P, prob.kinetics, alpha=100.0)
            ones = np.ones(m)
            assert np.max(np.abs(nk.D @ ones)) < 1e-13
            assert np.max(np.abs(np.einsum("nij,j->ni", nk.sqrtD, ones))) < 1e-10

    def test_recomposition(self):
        rng = np.random.default_rng(2)
        grid, prob = _problem(N=16, m=4)
        P = rng.dirichlet(np.ones(4), size=16).T.copy()
        nk = NoiseKernel(rng.uniform(0, 1, 16), P, prob.kinetics, alpha=4.0)
        DD = np.einsum("nij,njk->nik", nk.sqrtD, nk.sqrtD)
        assert np.max(np.abs(DD - nk.D)) < 1e-10

    def test_psd_violation_detected(self, monkeypatch):
        grid, prob = _problem(N=4)
        bad = np.zeros((4, 2, 2))
        bad[:, 0, 0] = -1e-6  # genuinely negative definite direction
        monkeypatch.setattr("hybridmem.langevin.covariance_matrices",
                            lambda u, p, k: bad)
        with pytest.raises(NumericsError, match="PSD"):
            NoiseKernel(np.zeros(4), np.full((2, 4), 0.5), prob.kinetics, alpha=1.0)

    def test_small_negatives_floored(self, monkeypatch):
        grid, prob = _problem(N=4)
        D = np.zeros((4, 2, 2))
        D[:, 0, 0] = D[:, 1, 1] = 1.0
        D[:, 0, 1] = D[:, 1, 0] = -1.0
        D[:, 0, 0] -= 5e-13  # eigenvalue slightly below zero but above -1e-12
        monkeypatch.setattr("hybridmem.langevin.covariance_matrices",
                            lambda u, p, k: D)
        nk = NoiseKernel(np.zeros(4), np.full((2, 4), 0.5), prob.kinetics, alpha=1.0)
        assert np.all(np.isfinite(nk.sqrtD))

    def test_clamp_inside_covariance_only(self):
        grid, prob = _problem(N=8)
        P = np.vstack([np.full(8, 1.2), np.full(8, -0.2)])  # outside [0, 1]
        nk = NoiseKernel(np.zeros(8), P, prob.kinetics, alpha=10.0)
        assert nk.clamp_active
        # covariance built from max(P, 0): s = 1.2*q12 + 0*q21 = 1.2
        assert nk.D[0, 0, 0] == pytest.approx(1.2)

    def test_alpha_validation(self):
        grid, prob = _problem(N=8)
        with pytest.raises(ValidationError):
            NoiseKernel(np.zeros(8), np.full((2, 8), 0.5), prob.kinetics, alpha=0.0)


class TestStepLangevin:
    def test_zero_noise_reduction_bit_identical(self):
        grid, prob_inf = _problem(N=32, alpha=math.inf, tanh_rate=True)
        p0 = np.vstack([np.ones(32), np.zeros(32)])
        u0 = 0.2 * np.sin(np.pi * grid.nodes)
        lang = solve_langevin(LangevinState(u0.copy(), p0.copy()), 0.5, prob_inf,
                              seed=3, cadence=6)
        limit_prob = prob_inf  # LangevinProblem extends the euler limit problem
        det = solve_limit(LimitState(u0.copy(), p0.copy()), 0.5, limit_prob, cadence=6)
        assert np.array_equal(lang.u, det.u)
        assert np.array_equal(lang.p, det.p)

    def test_noise_mass_exact_m2(self):
        grid, prob = _problem(N=16, alpha=25.0)
        state = LangevinState(np.full(16, 0.3), np.full((2, 16), 0.5))
        rng = make_rng(5)
        # the noise increment itself carries exactly zero mass
        nk = NoiseKernel(state.u, state.P, prob.kinetics, 25.0)
        eta = nk.increment(rng.standard_normal((2, 16)), 1e-3, grid.h)
        assert np.max(np.abs(eta.sum(axis=0))) == 0.0
        # a single step from a balanced state preserves the sums exactly
        st = step_langevin(state, 1e-3, prob, make_rng(6))
        assert np.max(np.abs(st.P.sum(axis=0) - 1.0)) == 0.0
        # accumulated steps stay within rounding of unit mass
        for _ in range(50):
            state = step_langevin(state, 1e-3, prob, rng)
        assert np.max(np.abs(state.P.sum(axis=0) - 1.0)) < 1e-12

    def test_noise_mass_tiny_m4(self):
        grid, prob = _problem(N=16, alpha=25.0, m=4)
        state = LangevinState(np.full(16, 0.3), np.full((4, 16), 0.25))
        rng = make_rng(6)
        for _ in range(50):
            state = step_langevin(state, 1e-3, prob, rng)
        assert np.max(np.abs(state.P.sum(axis=0) - 1.0)) < 1e-12

    def test_one_step_variance_oracle(self):
        # P = (0.5, 0.5) with equal constant rates is an equilibrium (F = 0);
        # the one-step increment variance is the defining property of the
        # noise factorization
        N, alpha, dt = 32, 50.0, 1e-3
        grid, prob = _problem(N=N, alpha=alpha, dt=dt)
        phi = sine_mode(grid, 2, 1, 1)
        p0 = np.full((2, N), 0.5)
        u0 = np.zeros(N)
        rng = make_rng(77)
        n = 10_000
        h = grid.h
        vals = np.empty(n)
        base = float(np.sum(phi.values[1] * p0[1]) * h)
        for r in range(n):
            st = step_langevin(LangevinState(u0.copy(), p0.copy()), dt, prob, rng)
            vals[r] = float(np.sum(phi.values[1] * st.P[1]) * h) - base
        var = vals.var(ddof=1)
        target = (dt / alpha) * limit_G(u0, p0, prob.kinetics, grid)(phi, phi)
        se = var * math.sqrt(2.0 / (n - 1))
        assert abs(var - target) <= 3 * se

    def test_dt_validation(self):
        grid, prob = _problem(dt=1e-3)
        state = LangevinState(np.zeros(32), np.full((2, 32), 0.5))
        with pytest.raises(ValidationError):
            step_langevin(state, 5e-3, prob, make_rng(0))


class TestSolveLangevin:
    def test_t_zero_identity(self):
        grid, prob = _problem()
        state = LangevinState(np.full(32, 0.1), np.full((2, 32), 0.5))
        traj = solve_langevin(state, 0.0, prob, seed=1, cadence=1)
        assert np.array_equal(traj.u[0], state.u)
        assert np.array_equal(traj.p[0], state.P)

    def test_ensemble_mean_tracks_deterministic(self):
        grid, prob = _problem(N=32, alpha=800.0, tanh_rate=True)
        p0 = np.vstack([np.ones(32), np.zeros(32)])
        u0 = np.zeros(32)
        T = 1.0
        det = solve_limit(LimitState(u0.copy(), p0.copy()), T, prob, cadence=2)
        n = 300
        means = np.zeros((2, 32))
        for s in range(n):
            traj = solve_langevin(LangevinState(u0.copy(), p0.copy()), T, prob,
                                  seed=21, stream=s, cadence=2)
            means += traj.p[-1]
        means /= n
        h = grid.h
        gap = math.sqrt(h * np.sum((means - det.p[-1]) ** 2))
        # O(1/alpha) bias plus Monte Carlo noise of the mean
        assert gap <= 1.0 / 800.0 * 50 + 0.05

    def test_fluctuation_variance_linearization(self):
        # sqrt(alpha) <phi, P(T) - p(T)> has variance ~ int limit_G dt on
        # horizons short against the kinetic relaxation time; over longer
        # horizons the drift Jacobian attenuates the fluctuation (the
        # martingale, not the fluctuation, carries the unattenuated variance)
        grid, prob = _problem(N=32, alpha=2000.0, dt=2e-4, tanh_rate=True)
        p0 = np.vstack([np.ones(32), np.zeros(32)])
        u0 = np.zeros(32)
        T = 0.02
        det = solve_limit(LimitState(u0.copy(), p0.copy()), T, prob, cadence=21)
        phi = sine_mode(grid, 2, 1, 1)
        target = integrated_limit_G(det, phi, prob.kinetics, grid)
        h = grid.h
        n = 400
        vals = np.empty(n)
        for s in range(n):
            traj = solve_langevin(LangevinState(u0.copy(), p0.copy()), T, prob,
                                  seed=33, stream=s, cadence=2)
            vals[s] = math.sqrt(2000.0) * float(
                np.sum(np.sum(phi.values * (traj.p[-1] - det.p[-1]), axis=0)) * h)
        var = vals.var(ddof=1)
        se = var * math.sqrt(2.0 / (n - 1))
        assert abs(var - target) <= 3 * se

    def test_excursions_reported_not_clipped(self):
        grid, prob = _problem(N=32, alpha=5.0)   # strong noise
        state = LangevinState(np.zeros(32), np.vstack([np.ones(32), np.zeros(32)]))
        traj = solve_langevin(state, 0.2, prob, seed=4, cadence=5)
        assert traj.p_excursion > 0.0
        assert traj.p.min() < 0.0 or traj.p.max() > 1.0
