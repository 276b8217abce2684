import numpy as np
import pytest

from hybridmem import ChannelKinetics, RateFunction
from hybridmem.errors import ConfigError, KineticsError, ValidationError
from hybridmem.kinetics import rate_from_dict


class TestRateFamilies:
    def test_constant(self):
        q = RateFunction("constant", (1.5,))
        assert np.all(q(np.linspace(-1, 1, 7)) == 1.5)
        assert q.bound(-1, 1) == 1.5
        assert q.lipschitz(-1, 1) == 0.0

    def test_affine(self):
        q = RateFunction("affine", (1.0, 0.5))
        vs = np.linspace(0, 1, 9)
        assert np.allclose(q(vs), 1.0 + 0.5 * vs)
        assert q.bound(0, 1) == 1.5
        assert q.lipschitz(0, 1) == 0.5

    def test_tanh(self):
        q = RateFunction("tanh", (1.0, 0.5, 2.0, 0.1))
        vs = np.linspace(-1, 1, 9)
        assert np.allclose(q(vs), 1.0 + 0.5 * np.tanh(2.0 * (vs - 0.1)))
        assert q.bound(-1, 1) == 1.5
        assert q.lipschitz(-1, 1) == 1.0

    def test_exp(self):
        q = RateFunction("exp", (0.5, -0.4, 0.0))  # 0.5*exp(-v/0.4) decreasing
        vs = np.linspace(0, 1, 9)
        assert np.allclose(q(vs), 0.5 * np.exp(-vs / 0.4))
        assert q.bound(0, 1) == pytest.approx(0.5)

    def test_linexp_matches_formula_and_singularity(self):
        a, k, v0 = 0.3, 0.25, 0.2
        q = RateFunction("linexp", (a, k, v0))
        vs = np.array([-0.5, 0.0, 0.4, 1.0])
        x = (vs - v0) / k
        expected = a * k * x / (1.0 - np.exp(-x))
        assert np.allclose(q(vs), expected, rtol=1e-12)
        # removable singularity: continuous through v = v0
        eps = 1e-9
        left, mid, right = q(v0 - eps), q(np.float64(v0)), q(v0 + eps)
        assert abs(mid - a * k) < 1e-8
        assert abs(left - right) < 1e-8

    def test_lipschitz_bound_holds(self):
        rng = np.random.default_rng(0)
        for q in (RateFunction("tanh", (1.0, 0.5, 3.0, 0.2)),
                  RateFunction("exp", (0.5, 0.7, 0.0)),
                  RateFunction("linexp", (0.4, 0.3, 0.1))):
            L = q.lipschitz(0.0, 1.0)
            v = rng.uniform(0, 1, 200)
            w = rng.uniform(0, 1, 200)
            assert np.all(np.abs(q(v) - q(w)) <= L * np.abs(v - w) + 1e-12)

    def test_unknown_family_rejected(self):
        with pytest.raises(ConfigError):
            RateFunction("quadratic", (1.0,))

    def test_rate_from_dict(self):
        q = rate_from_dict({"family": "tanh", "params": [1.0, 0.5, 1.0, 0.0]})
        assert q.family == "tanh"
        with pytest.raises(ConfigError):
            rate_from_dict({"params": [1.0]})


class TestChannelKinetics:
    def test_bounds_window(self):
        kin = ChannelKinetics(
            2, {(0, 1): RateFunction("constant", (1.0,))}, g=[0.0, 1.0], E=[-0.5, 1.0])
        assert kin.u_minus == -0.5
        assert kin.u_plus == 1.0
        assert kin.qbar == 1.0

    def test_negative_rate_spotted_at_construction(self):
        with pytest.raises(KineticsError):
            ChannelKinetics(2, {(0, 1): RateFunction("affine", (0.1, -1.0))},
                            g=[0.0, 0.0], E=[0.0, 1.0])

    def test_negative_conductance_rejected(self):
        with pytest.raises(ValidationError):
            ChannelKinetics(2, {}, g=[-1.0, 0.0], E=[0.0, 1.0])

    def test_pair_out_of_range(self):
        with pytest.raises(ValidationError):
            ChannelKinetics(2, {(0, 2): RateFunction("constant", (1.0,))},
                            g=[0.0, 0.0], E=[0.0, 1.0])

    def test_rate_matrix_rows_sum_to_zero(self):
        kin = ChannelKinetics(
            3, {(0, 1): RateFunction("constant", (2.0,)),
                (1, 0): RateFunction("constant", (1.0,)),
                (1, 2): RateFunction("tanh", (0.5, 0.2, 1.0, 0.0))},
            g=[0.0, 0.0, 1.0], E=[0.0, 0.0, 1.0])
        Q = kin.rate_matrix(0.3)
        assert np.allclose(Q.sum(axis=1), 0.0, atol=1e-15)
        assert Q[0, 1] == 2.0

    def test_outgoing_bounds(self):
        kin = ChannelKinetics(
            2, {(0, 1): RateFunction("constant", (2.0,)),
                (1, 0): RateFunction("constant", (1.0,))},
            g=[0.0, 0.0], E=[0.0, 1.0])
        assert kin.outgoing_bound_per_state().tolist() == [2.0, 1.0]

    def test_packed_roundtrip(self):
        kin = ChannelKinetics(
            2, {(0, 1): RateFunction("tanh", (1.0, 0.5, 1.0, 0.0)),
                (1, 0): RateFunction("constant", (1.0,))},
            g=[0.0, 1.0], E=[0.0, 1.0])
        pair_row, codes, params = kin.packed()
        assert pair_row[0, 1] == 0 and pair_row[1, 0] == 1
        assert codes.tolist() == [2, 0]
        assert params[1, 0] == 1.0

    def test_g_field_shape_validation(self):
        kin = ChannelKinetics(2, {}, g=[0.0, 1.0], E=[0.0, 1.0], grid_n=8)
        assert kin.g_on_grid(8).shape == (2, 8)
        with pytest.raises(ValidationError):
            kin.g_on_grid(16)
        with pytest.raises(ValidationError):
            ChannelKinetics(2, {}, g=[0.0, 1.0, 2.0], E=[0.0, 1.0])
