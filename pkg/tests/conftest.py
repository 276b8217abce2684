import numpy as np
import pytest

from hybridmem import (ChannelConfiguration, ChannelKinetics, EllipticOperator,
                       FlowProblem, RateFunction, SolverSettings, SpatialGrid,
                       uniform_partition)
from hybridmem.benchmarks import benchmark_model
from hybridmem.pde import MembraneState
from hybridmem.pdmp import HybridState


@pytest.fixture(scope="session")
def frozen_model():
    """Frozen-membrane benchmark: Lambda(0) = 14, membrane decoupled."""
    return benchmark_model("frozen")


@pytest.fixture(scope="session")
def two_state_small():
    """Coupled 2-state benchmark at toy resolution for fast statistical tests."""
    return benchmark_model(
        "two_state", levels=[{"compartments": 4, "channels": 8},
                             {"compartments": 8, "channels": 24}], N=64)


def make_constant_rate_problem(grid_n=16, n_comp=1, channels=1, q12=2.0, q21=0.0,
                               g=(0.0, 0.0), E=(0.0, 1.0), dt_max=5e-3, a=1.0):
    """Helper for constant-rate scenarios with a decoupled membrane."""
    grid = SpatialGrid(1.0, grid_n)
    part = uniform_partition(grid, n_comp, channels)
    rates = {}
    if q12 > 0:
        rates[(0, 1)] = RateFunction("constant", (q12,))
    if q21 > 0:
        rates[(1, 0)] = RateFunction("constant", (q21,))
    kin = ChannelKinetics(2, rates, g=list(g), E=list(E))
    prob = FlowProblem(grid, EllipticOperator.constant(a, grid), kin, part,
                       SolverSettings(dt_max=dt_max))
    return grid, part, kin, prob


def make_state(part, counts, u=None, t=0.0):
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim == 1:
        counts = counts[:, None]
    u = np.zeros(part.grid.N) if u is None else np.asarray(u, dtype=float)
    return HybridState(MembraneState(u, t), ChannelConfiguration(counts))
