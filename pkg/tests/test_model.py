import numpy as np
import pytest

from hybridmem import (ChannelConfiguration, ChannelKinetics, RateFunction,
                       SpatialGrid, build_partition_ladder, compartment_average,
                       coordinate_field, counts_from_fractions, jump_event_rates,
                       partition_from_lengths, uniform_partition)
from hybridmem.errors import (KineticsError, ResolutionError, ValidationError)
from hybridmem.model import compartment_averages

from conftest import make_state


class TestSpatialGrid:
    def test_weights_sum_to_length(self):
        for L, N in ((1.0, 256), (2.5, 100), (0.7, 33)):
            grid = SpatialGrid(L, N)
            assert abs(grid.weights.sum() - L) <= 8 * np.finfo(float).eps * L

    def test_nodes_interior_increasing(self):
        grid = SpatialGrid(1.0, 17)
        assert np.all(np.diff(grid.nodes) > 0)
        assert grid.nodes[0] > 0 and grid.nodes[-1] < grid.L

    def test_too_few_cells_rejected(self):
        with pytest.raises(ValidationError):
            SpatialGrid(1.0, 3)

    def test_bad_length_rejected(self):
        with pytest.raises(ValidationError):
            SpatialGrid(-1.0, 16)


class TestPartitionLadder:
    def test_uniform_ladder_statistics(self):
        grid = SpatialGrid(1.0, 256)
        parts = build_partition_ladder(grid, [(8, 10), (16, 40), (32, 160)])
        assert [p.delta_plus for p in parts] == [1 / 8, 1 / 16, 1 / 32]
        assert [p.ell_minus for p in parts] == [10, 40, 160]
        assert all(p.balance_ratio == 1.0 for p in parts)

    def test_single_compartment(self):
        grid = SpatialGrid(1.0, 16)
        (p,) = build_partition_ladder(grid, [(1, 1)])
        assert p.delta_plus == grid.L
        assert p.nu_plus == p.nu_minus == grid.L
        assert p.ell_plus == p.ell_minus == 1
        assert p.balance_ratio == 1.0

    def test_nonuniform_balance_ratio(self):
        grid = SpatialGrid(1.0, 256)
        part = partition_from_lengths(grid, [0.25, 0.75], [10, 30])
        # direct evaluation of the ratio definition
        assert part.balance_ratio == pytest.approx((10 * 0.25) / (30 * 0.75), rel=1e-12)
        # brute-force min/max over compartments
        lens = part.lengths
        chans = part.channels
        brute = (min(chans) * min(lens)) / (max(chans) * max(lens))
        assert part.balance_ratio == pytest.approx(brute, rel=1e-12)

    def test_statistics_match_brute_force(self):
        rng = np.random.default_rng(7)
        grid = SpatialGrid(1.0, 128)
        for _ in range(25):
            K = int(rng.integers(1, 9))
            cuts = np.sort(rng.choice(np.arange(2, 127), size=K - 1, replace=False)) \
                if K > 1 else np.array([], dtype=int)
            offsets = np.concatenate([[0], cuts, [128]])
            if np.any(np.diff(offsets) < 1):
                continue
            chans = rng.integers(1, 50, size=K)
            from hybridmem import Partition
            p = Partition(grid, offsets, chans)
            lens = np.diff(offsets) * grid.h
            assert p.delta_plus == max(lens)
            assert p.nu_minus == min(lens)
            assert p.ell_plus == max(chans)
            assert p.ell_minus == min(chans)

    def test_below_two_cells_rejected(self):
        grid = SpatialGrid(1.0, 16)
        with pytest.raises(ResolutionError):
            build_partition_ladder(grid, [(16, 4)])

    def test_inconsistent_ladder_rejected(self):
        grid = SpatialGrid(1.0, 64)
        with pytest.raises(ValidationError):
            build_partition_ladder(grid, [(8, 10), (8, 40)])   # delta+ not decreasing
        with pytest.raises(ValidationError):
            build_partition_ladder(grid, [(4, 40), (8, 40)])   # ell- not increasing

    def test_clt_balance_tolerance(self):
        grid = SpatialGrid(1.0, 256)
        with pytest.raises(ValidationError):
            build_partition_ladder(grid, [{"lengths": [0.25, 0.75], "channels": [10, 30]}],
                                   clt_balance_tol=0.5)

    def test_empty_compartments_allowed(self):
        grid = SpatialGrid(1.0, 64)
        part = partition_from_lengths(grid, [0.5, 0.5], [8, 0])
        assert part.nonempty.tolist() == [0]
        assert part.ell_minus == 8   # statistics over non-empty only
        assert part.delta_plus == 0.5


class TestCoordinateField:
    def test_single_compartment_fractions(self):
        grid = SpatialGrid(1.0, 16)
        part = uniform_partition(grid, 1, 10)
        z = coordinate_field(ChannelConfiguration([[4], [6]]), part)
        assert z.values[:, 0].tolist() == [0.4, 0.6]
        assert np.all(z.on_grid()[0] == 0.4)

    def test_degenerate_occupancy(self):
        grid = SpatialGrid(1.0, 16)
        part = uniform_partition(grid, 4, 5)
        z = coordinate_field(ChannelConfiguration([[5] * 4, [0] * 4]), part)
        assert np.all(z.values[0] == 1.0)
        assert np.all(z.values[1] == 0.0)

    def test_two_compartment_hand_values(self):
        grid = SpatialGrid(1.0, 16)
        from hybridmem import Partition
        part = Partition(grid, [0, 8, 16], [2, 4])
        z = coordinate_field(ChannelConfiguration([[1, 3], [1, 1]]), part)
        assert z.values[0].tolist() == [0.5, 0.75]

    def test_count_violation_rejected(self):
        grid = SpatialGrid(1.0, 16)
        part = uniform_partition(grid, 1, 10)
        with pytest.raises(ValidationError):
            coordinate_field(ChannelConfiguration([[4], [7]]), part)

    def test_invariants_random_configs(self):
        rng = np.random.default_rng(3)
        grid = SpatialGrid(1.0, 64)
        for _ in range(40):
            K = int(rng.integers(1, 8))
            m = int(rng.integers(2, 5))
            part = uniform_partition(grid, K, int(rng.integers(1, 30)))
            counts = np.zeros((m, K), dtype=np.int64)
            for k in range(K):
                splits = rng.multinomial(part.channels[k], np.ones(m) / m)
                counts[:, k] = splits
            z = coordinate_field(ChannelConfiguration(counts), part)
            z.validate()
            # channel conservation is exact in integer arithmetic
            assert np.array_equal(counts.sum(axis=0), part.channels)

    def test_empty_compartment_zero(self):
        grid = SpatialGrid(1.0, 64)
        part = partition_from_lengths(grid, [0.5, 0.5], [4, 0])
        z = coordinate_field(ChannelConfiguration([[4, 0], [0, 0]]), part)
        z.validate()
        assert np.all(z.values[:, 1] == 0.0)


class TestCompartmentAverage:
    def test_constants_exact(self):
        grid = SpatialGrid(1.0, 48)
        part = uniform_partition(grid, 3, 1)
        for c in (0.1, -0.7, 1 / 3):
            u = np.full(grid.N, c)
            for k in range(3):
                assert compartment_average(u, k, part) == c

    def test_linear_profile_oracle(self):
        # u(x) = x on (0, 1), compartment (0, 0.5): exact integral average 0.25
        grid = SpatialGrid(1.0, 128)
        part = partition_from_lengths(grid, [0.5, 0.5], [1, 1])
        u = grid.nodes.copy()
        avg = compartment_average(u, 0, part)
        # midpoint rule is exact for linear functions here
        assert avg == pytest.approx(0.25, abs=1e-12)

    def test_alternating_cancellation(self):
        grid = SpatialGrid(1.0, 32)
        part = uniform_partition(grid, 1, 1)
        u = np.tile([1.0, -1.0], 16)
        assert compartment_average(u, 0, part) == 0.0

    def test_linearity(self):
        rng = np.random.default_rng(5)
        grid = SpatialGrid(1.0, 64)
        part = uniform_partition(grid, 4, 1)
        u, v = rng.normal(size=64), rng.normal(size=64)
        for k in range(4):
            lin = compartment_average(2.0 * u + v, k, part)
            parts = 2.0 * compartment_average(u, k, part) + compartment_average(v, k, part)
            assert lin == pytest.approx(parts, rel=1e-12, abs=1e-14)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(6)
        grid = SpatialGrid(1.0, 64)
        part = uniform_partition(grid, 8, 1)
        u = rng.normal(size=64)
        av = compartment_averages(u, part)
        for k in range(8):
            assert av[k] == compartment_average(u, k, part)


class TestJumpEventRates:
    def test_benchmark_rate_table(self):
        grid = SpatialGrid(1.0, 16)
        part = uniform_partition(grid, 1, 10)
        kin = ChannelKinetics(2, {(0, 1): RateFunction("constant", (2.0,)),
                                  (1, 0): RateFunction("constant", (1.0,))},
                              g=[0.0, 0.0], E=[0.0, 1.0])
        state = make_state(part, [4, 6])
        rt = jump_event_rates(state, kin, part)
        assert rt.rates[0, 0, 1] == 8.0
        assert rt.rates[0, 1, 0] == 6.0
        assert rt.total == 14.0
        # brute-force enumeration over all events
        assert sum(r for *_ev, r in rt.entries()) == rt.total

    def test_empty_state_zero_rates(self):
        grid = SpatialGrid(1.0, 16)
        part = uniform_partition(grid, 2, 4)
        kin = ChannelKinetics(2, {(0, 1): RateFunction("constant", (3.0,))},
                              g=[0.0, 0.0], E=[0.0, 1.0])
        state = make_state(part, [[0, 0], [4, 4]])
        rt = jump_event_rates(state, kin, part)
        assert rt.total == 0.0

    def test_zero_kinetics_absorbing(self):
        grid = SpatialGrid(1.0, 16)
        part = uniform_partition(grid, 2, 4)
        kin = ChannelKinetics(2, {}, g=[0.0, 0.0], E=[0.0, 1.0])
        state = make_state(part, [[4, 4], [0, 0]])
        assert jump_event_rates(state, kin, part).total == 0.0

    def test_total_rate_bound(self):
        rng = np.random.default_rng(11)
        grid = SpatialGrid(1.0, 64)
        part = uniform_partition(grid, 4, 12)
        kin = ChannelKinetics(2, {(0, 1): RateFunction("tanh", (1.0, 0.5, 1.0, 0.0)),
                                  (1, 0): RateFunction("constant", (1.0,))},
                              g=[0.0, 1.0], E=[0.0, 1.0])
        bound = part.total_channels * kin.m * (kin.m - 1) * kin.qbar
        for _ in range(20):
            counts = rng.multinomial(12, [0.5, 0.5], size=4).T
            u = rng.uniform(0, 1, size=64)
            state = make_state(part, counts, u=u)
            rt = jump_event_rates(state, kin, part)
            assert 0.0 <= rt.total <= bound
            # every entry is a count times a rate evaluation
            for k, i, j, r in rt.entries():
                v = compartment_average(u, k, part)
                assert r == pytest.approx(counts[i, k] * kin.rate_functions[(i, j)](np.float64(v)),
                                          rel=1e-12)

    def test_negative_rate_reported(self):
        grid = SpatialGrid(1.0, 16)
        part = uniform_partition(grid, 1, 5)
        kin = ChannelKinetics(2, {(0, 1): RateFunction("affine", (0.1, -1.0))},
                              g=[0.0, 0.0], E=[0.0, 1.0], spot_check=False)
        state = make_state(part, [5, 0], u=np.full(16, 0.9))
        with pytest.raises(KineticsError, match="q_12"):
            jump_event_rates(state, kin, part)


class TestCountsFromFractions:
    def test_largest_remainder_conserves(self):
        grid = SpatialGrid(1.0, 64)
        part = uniform_partition(grid, 4, 7)
        cfg = counts_from_fractions(part, np.array([0.3, 0.7]))
        assert np.array_equal(cfg.counts.sum(axis=0), part.channels)
        assert np.max(np.abs(cfg.counts / 7 - np.array([[0.3], [0.7]]))) <= 1 / 7

    def test_point_mass_exact(self):
        grid = SpatialGrid(1.0, 64)
        part = uniform_partition(grid, 4, 10)
        cfg = counts_from_fractions(part, np.array([1.0, 0.0]))
        assert np.all(cfg.counts[0] == 10)
