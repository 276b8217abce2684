import numpy as np
import pytest

from hybridmem import (ChannelConfiguration, ChannelKinetics, EllipticOperator,
                       FlowProblem, RateFunction, SolverSettings, SpatialGrid,
                       coordinate_field, h1_seminorm, integrate_to, l2_norm,
                       step_flow, uniform_partition)
from hybridmem.errors import NumericsError, SchemeError, ValidationError
from hybridmem.pde import MembraneState

from conftest import make_constant_rate_problem


def _pure_diffusion_problem(N, dt_max, a=1.0):
    grid = SpatialGrid(1.0, N)
    part = uniform_partition(grid, 2, 1)
    kin = ChannelKinetics(2, {}, g=[0.0, 0.0], E=[-1.0, 1.0])
    prob = FlowProblem(grid, EllipticOperator.constant(a, grid), kin, part,
                       SolverSettings(dt_max=dt_max))
    z = coordinate_field(ChannelConfiguration([[1, 1], [0, 0]]), part)
    return grid, prob, z


def _run_heat(N, dt, T=0.1):
    grid, prob, z = _pure_diffusion_problem(N, dt)
    st = MembraneState(np.sin(np.pi * grid.nodes), 0.0)
    for _ in range(int(round(T / dt))):
        st = step_flow(st, z, dt, prob)
    exact = np.exp(-np.pi ** 2 * T) * np.sin(np.pi * grid.nodes)
    return l2_norm(st.u - exact, grid), grid


class TestStepFlow:
    def test_heat_equation_oracle(self):
        err, _ = _run_heat(64, 1e-4)
        # error <= C (h^2 + dt) against the closed-form solution
        assert err <= 5.0 * ((1 / 64) ** 2 + 1e-4)

    def test_spatial_order_two(self):
        errs = [_run_heat(N, 1e-5)[0] for N in (16, 32, 64)]
        for a, b in zip(errs, errs[1:]):
            assert 3.0 <= a / b <= 5.0

    def test_temporal_order_one_with_reaction(self):
        # explicit reaction makes the splitting first order in dt
        grid = SpatialGrid(1.0, 32)
        part = uniform_partition(grid, 2, 2)
        kin = ChannelKinetics(2, {}, g=[4.0, 4.0], E=[0.0, 1.0])
        z = coordinate_field(ChannelConfiguration([[1, 1], [1, 1]]), part)

        def solve(dt, T=0.5):
            prob = FlowProblem(grid, EllipticOperator.constant(0.1, grid), kin, part,
                               SolverSettings(dt_max=dt))
            st = MembraneState(0.3 * np.sin(np.pi * grid.nodes), 0.0)
            for _ in range(int(round(T / dt))):
                st = step_flow(st, z, dt, prob)
            return st.u

        ref = solve(1e-5)
        errs = [l2_norm(solve(dt) - ref, grid) for dt in (0.02, 0.01, 0.005)]
        for a, b in zip(errs, errs[1:]):
            assert 1.6 <= a / b <= 2.5

    def test_zero_fixed_point(self):
        grid = SpatialGrid(1.0, 32)
        part = uniform_partition(grid, 2, 2)
        kin = ChannelKinetics(2, {(0, 1): RateFunction("constant", (1.0,))},
                              g=[1.0, 1.0], E=[0.0, 0.0])
        prob = FlowProblem(grid, EllipticOperator.constant(1.0, grid), kin, part,
                           SolverSettings(dt_max=1e-3))
        z = coordinate_field(ChannelConfiguration([[1, 1], [1, 1]]), part)
        st = MembraneState(np.zeros(32), 0.0)
        for _ in range(50):
            st = step_flow(st, z, 1e-3, prob)
        assert np.all(st.u == 0.0)

    def test_scalar_relaxation_with_diffusion_bypassed(self):
        # a = 0 via the test-harness ellipticity bypass: nodewise ODE
        # du/dt = g z (E - u), explicit Euler accuracy O(dt)
        grid = SpatialGrid(1.0, 8)
        part = uniform_partition(grid, 1, 2)
        g_val, E_val = 2.0, 1.0
        kin = ChannelKinetics(2, {}, g=[g_val, 0.0], E=[E_val, 0.0])
        op = EllipticOperator(np.zeros(8), min_coefficient=0.0)
        dt = 1e-4
        prob = FlowProblem(grid, op, kin, part, SolverSettings(dt_max=dt))
        z = coordinate_field(ChannelConfiguration([[1], [1]]), part)  # z1 = 0.5
        st = MembraneState(np.zeros(8), 0.0)
        T = 0.5
        for _ in range(int(round(T / dt))):
            st = step_flow(st, z, dt, prob)
        # du/dt = g z (E - u) has solution E(1 - exp(-g z t))
        exact = E_val * (1.0 - np.exp(-g_val * 0.5 * T))
        assert np.max(np.abs(st.u - exact)) <= 5.0 * dt

    def test_pointwise_bounds_enforced(self):
        grid, prob, z = _pure_diffusion_problem(16, 1e-3)
        st = MembraneState(np.full(16, 1.5), 0.0)  # beyond u_plus = 1
        with pytest.raises(SchemeError):
            step_flow(st, z, 1e-3, prob)

    def test_non_finite_input_rejected(self):
        grid, prob, z = _pure_diffusion_problem(16, 1e-3)
        st = MembraneState(np.full(16, np.nan), 0.0)
        with pytest.raises(NumericsError):
            step_flow(st, z, 1e-3, prob)

    def test_dt_above_policy_rejected(self):
        grid, prob, z = _pure_diffusion_problem(16, 1e-3)
        st = MembraneState(np.zeros(16), 0.0)
        with pytest.raises(ValidationError):
            step_flow(st, z, 2e-3, prob)

    def test_step_against_dense_solve(self):
        # independent oracle: assemble the CN system densely and solve it
        rng = np.random.default_rng(8)
        grid = SpatialGrid(1.0, 24)
        part = uniform_partition(grid, 3, 4)
        kin = ChannelKinetics(2, {}, g=[0.5, 1.0], E=[0.0, 1.0])
        a = 0.5 + rng.uniform(0, 1, 24)
        prob = FlowProblem(grid, EllipticOperator(a), kin, part,
                           SolverSettings(dt_max=1e-3))
        counts = np.array([[2, 1, 4], [2, 3, 0]])
        z = coordinate_field(ChannelConfiguration(counts), part)
        u = 0.5 + 0.3 * np.sin(2 * np.pi * grid.nodes)
        dt, h = 1e-3, grid.h

        lap = np.zeros((24, 24))
        for x in range(24):
            lap[x, x] = -2.0
            if x > 0:
                lap[x, x - 1] = 1.0
            if x < 23:
                lap[x, x + 1] = 1.0
        lap[0, 0] -= 1.0   # Dirichlet ghost
        lap[-1, -1] -= 1.0
        A = np.diag(a) @ lap / h ** 2
        zg = z.on_grid()
        react = (prob.reaction.g * zg * (kin.E[:, None] - u)).sum(axis=0)
        rhs = (np.eye(24) + dt / 2 * A) @ u + dt * react
        expected = np.linalg.solve(np.eye(24) - dt / 2 * A, rhs)

        out = step_flow(MembraneState(u, 0.0), z, dt, prob)
        assert np.max(np.abs(out.u - expected)) < 1e-12

    def test_flow_bit_deterministic(self):
        grid, prob, z = _pure_diffusion_problem(32, 1e-3)
        st = MembraneState(np.sin(np.pi * grid.nodes), 0.0)
        a = step_flow(st, z, 1e-3, prob)
        b = step_flow(st, z, 1e-3, prob)
        assert np.array_equal(a.u, b.u)


class TestIntegrateTo:
    def test_identity_at_t_end(self):
        grid, part, kin, prob = make_constant_rate_problem()
        z = coordinate_field(ChannelConfiguration([[1], [0]]), part)
        st = MembraneState(np.zeros(16), 0.0)
        out, hz = integrate_to(st, z, 0.0, prob)
        assert out.t == 0.0
        assert len(hz.times) == 0 and len(hz.rates) == 0

    def test_constant_rate_samples(self):
        grid, part, kin, prob = make_constant_rate_problem(q12=2.0, q21=1.0, channels=10)
        counts = np.array([[4], [6]], dtype=np.int64)
        z = coordinate_field(ChannelConfiguration(counts), part)
        st = MembraneState(np.zeros(16), 0.0)
        out, hz = integrate_to(st, z, 0.5, prob, counts=counts)
        assert np.all(hz.rates == 14.0)
        assert hz.cumulative()[-1] == pytest.approx(7.0, rel=1e-12)
        assert out.t == 0.5

    def test_time_varying_hazard_oracle(self):
        # rigged kinetics: q12(v) = v and u(t) = E(1 - exp(-g z t)) nodewise
        # with diffusion bypassed, so the hazard has a closed form.
        grid = SpatialGrid(1.0, 8)
        part = uniform_partition(grid, 1, 1)
        kin = ChannelKinetics(2, {(0, 1): RateFunction("affine", (0.0, 1.0))},
                              g=[1.0, 1.0], E=[1.0, 1.0])
        op = EllipticOperator(np.zeros(8), min_coefficient=0.0)
        dt = 2e-4
        prob = FlowProblem(grid, op, kin, part, SolverSettings(dt_max=dt))
        counts = np.array([[1], [0]], dtype=np.int64)
        z = coordinate_field(ChannelConfiguration(counts), part)
        st = MembraneState(np.zeros(8), 0.0)
        T = 0.5
        out, hz = integrate_to(st, z, T, prob, counts=counts)
        # Lambda(t) = u(t) = 1 - exp(-t); H(T) = T - (1 - exp(-T))
        exact = T - (1.0 - np.exp(-T))
        assert hz.cumulative()[-1] == pytest.approx(exact, abs=20 * dt * T)

    def test_trapezoid_exact_for_linear_rates(self):
        from hybridmem.pde import HazardSamples
        c = 3.0
        t = np.linspace(0.0, 2.0, 41)
        hz = HazardSamples(t, c * t)
        assert hz.cumulative()[-1] == pytest.approx(c * 2.0 ** 2 / 2.0, rel=1e-12)

    def test_deterministic(self):
        grid, part, kin, prob = make_constant_rate_problem(q12=2.0, q21=1.0, channels=10,
                                                           g=(0.5, 0.5))
        counts = np.array([[4], [6]], dtype=np.int64)
        z = coordinate_field(ChannelConfiguration(counts), part)
        st = MembraneState(0.2 * np.sin(np.pi * grid.nodes), 0.0)
        a1, h1 = integrate_to(st, z, 0.3, prob, counts=counts)
        a2, h2 = integrate_to(st, z, 0.3, prob, counts=counts)
        assert np.array_equal(a1.u, a2.u)
        assert np.array_equal(h1.rates, h2.rates)

    def test_backwards_time_rejected(self):
        grid, part, kin, prob = make_constant_rate_problem()
        z = coordinate_field(ChannelConfiguration([[1], [0]]), part)
        with pytest.raises(ValidationError):
            integrate_to(MembraneState(np.zeros(16), 1.0), z, 0.5, prob)


class TestNorms:
    def test_zero(self):
        grid = SpatialGrid(1.0, 32)
        assert l2_norm(np.zeros(32), grid) == 0.0
        assert h1_seminorm(np.zeros(32), grid) == 0.0

    def test_sine_analytic_values(self):
        for N in (128, 256):
            grid = SpatialGrid(1.0, N)
            u = np.sin(np.pi * grid.nodes)
            h = grid.h
            assert l2_norm(u, grid) == pytest.approx(np.sqrt(0.5), abs=5 * h ** 2)
            assert h1_seminorm(u, grid) == pytest.approx(np.pi * np.sqrt(0.5), abs=20 * h ** 2)

    def test_homogeneity_exact(self):
        rng = np.random.default_rng(2)
        grid = SpatialGrid(1.0, 64)
        u = rng.normal(size=64)
        assert l2_norm(-2.0 * u, grid) == 2.0 * l2_norm(u, grid)
        assert h1_seminorm(4.0 * u, grid) == 4.0 * h1_seminorm(u, grid)

    def test_seminorm_zero_only_for_zero(self):
        # with the Dirichlet extension a nonzero constant has positive seminorm
        grid = SpatialGrid(1.0, 32)
        assert h1_seminorm(np.full(32, 0.5), grid) > 0.0


class TestEllipticOperator:
    def test_ellipticity_enforced(self):
        grid = SpatialGrid(1.0, 16)
        with pytest.raises(ValidationError):
            EllipticOperator(np.zeros(16))
        EllipticOperator(np.zeros(16), min_coefficient=0.0)  # explicit bypass

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            EllipticOperator(np.array([1.0, np.inf, 1.0, 1.0]))
