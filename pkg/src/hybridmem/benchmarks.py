"""Fixed benchmark models used across the test and study suite.

two_state   : q_12(u) = 1 + 0.5 tanh(u), q_21(u) = 1, conductance 1 on the
              open state, reversal potentials (0, 1), domain (0, 1).
four_state  : a Hodgkin-Huxley flavored chain C1 <-> C2 <-> O <-> I with
              voltage-dependent forward rates; only O conducts.
frozen      : single compartment, constant rates q_12 = 2, q_21 = 1 with
              10 channels split (4, 6), zero conductance; the total rate at
              t = 0 is 14 and the membrane is decoupled.
"""

from __future__ import annotations

import copy

from .config import build_model
from .errors import ConfigError


def two_state_config(levels=None, N: int = 256, seed: int = 2024) -> dict:
    if levels is None:
        levels = [{"compartments": 8, "channels": 10},
                  {"compartments": 16, "channels": 40},
                  {"compartments": 32, "channels": 160}]
    return {
        "schema_version": 1,
        "model": {
            "grid": {"L": 1.0, "N": N},
            "diffusion": {"a": 1.0},
            "kinetics": {
                "m": 2,
                "rates": {
                    "1->2": {"family": "tanh", "params": [1.0, 0.5, 1.0, 0.0]},
                    "2->1": {"family": "constant", "params": [1.0]},
                },
                "g": [0.0, 1.0],
                "E": [0.0, 1.0],
            },
            "partition_ladder": copy.deepcopy(levels),
            "initial": {"u": {"kind": "zero"}, "p": {"kind": "point_mass", "state": 1}},
        },
        "solver": {"dt_max": 5e-4, "safety": 0.9, "hazard_samples": 20,
                   "limit_dt": 5e-4, "langevin_dt": 5e-4},
        "execution": {"seed": seed, "workers": 1, "out_dir": "out"},
    }


def four_state_config(levels=None, N: int = 128, seed: int = 2024) -> dict:
    if levels is None:
        levels = [{"compartments": 8, "channels": 24}]
    return {
        "schema_version": 1,
        "model": {
            "grid": {"L": 1.0, "N": N},
            "diffusion": {"a": 1.0},
            "kinetics": {
                "m": 4,
                "rates": {
                    "1->2": {"family": "tanh", "params": [0.9, 0.4, 2.0, 0.3]},
                    "2->1": {"family": "constant", "params": [0.8]},
                    "2->3": {"family": "tanh", "params": [0.7, 0.3, 1.0, 0.0]},
                    "3->2": {"family": "constant", "params": [1.1]},
                    "3->4": {"family": "tanh", "params": [0.25, 0.1, 1.0, 0.5]},
                    "4->3": {"family": "constant", "params": [0.5]},
                },
                "g": [0.0, 0.0, 1.0, 0.0],
                "E": [0.0, 0.0, 1.0, 0.0],
            },
            "partition_ladder": copy.deepcopy(levels),
            "initial": {"u": {"kind": "zero"}, "p": {"kind": "point_mass", "state": 1}},
        },
        "solver": {"dt_max": 5e-4, "safety": 0.9, "hazard_samples": 20,
                   "limit_dt": 5e-4, "langevin_dt": 5e-4},
        "execution": {"seed": seed, "workers": 1, "out_dir": "out"},
    }


def frozen_config(N: int = 16, seed: int = 2024) -> dict:
    """Frozen-membrane benchmark: constant rates, Lambda(0) = 4*2 + 6*1 = 14."""
    return {
        "schema_version": 1,
        "model": {
            "grid": {"L": 1.0, "N": N},
            "diffusion": {"a": 1.0},
            "kinetics": {
                "m": 2,
                "rates": {
                    "1->2": {"family": "constant", "params": [2.0]},
                    "2->1": {"family": "constant", "params": [1.0]},
                },
                "g": [0.0, 0.0],
                "E": [0.0, 1.0],
            },
            "partition_ladder": [{"compartments": 1, "channels": 10}],
            "initial": {"u": {"kind": "zero"},
                        "p": {"kind": "values", "values": [0.4, 0.6]}},
        },
        "solver": {"dt_max": 5e-3, "safety": 0.9, "hazard_samples": 20,
                   "limit_dt": 5e-3, "langevin_dt": 5e-3},
        "execution": {"seed": seed, "workers": 1, "out_dir": "out"},
    }


_REGISTRY = {"two_state": two_state_config, "four_state": four_state_config,
             "frozen": frozen_config}


def benchmark_config(name: str, **kwargs) -> dict:
    if name not in _REGISTRY:
        raise ConfigError(f"unknown benchmark {name!r}; have {sorted(_REGISTRY)}")
    return _REGISTRY[name](**kwargs)


def benchmark_model(name: str, **kwargs):
    return build_model(benchmark_config(name, **kwargs))
