"""Experiment configuration: schema validation, hashing and model assembly.

Configs are JSON documents with a mandatory schema version; unknown keys
are rejected so silent typos cannot change an experiment.  The config file
is the source of truth; CLI flags override seed, worker count and output
directory only.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .kinetics import ChannelKinetics, rate_from_dict
from .limit import LimitProblem, LimitState
from .model import (Partition, SpatialGrid, build_partition_ladder,
                    counts_from_fractions)
from .pde import EllipticOperator, FlowProblem, MembraneState, SolverSettings
from .pdmp import HybridState

SCHEMA_VERSION = 1

STUDY_KINDS = ("lln", "clt", "ito", "langevin-compare", "diagnostics")
MIN_REPLICATES = {"lln": 4, "clt": 16, "ito": 1000, "langevin-compare": 16,
                  "diagnostics": 2}

_TOP_KEYS = {"schema_version", "model", "solver", "study", "execution"}
_MODEL_KEYS = {"grid", "diffusion", "kinetics", "partition_ladder", "initial"}
_GRID_KEYS = {"L", "N"}
_DIFFUSION_KEYS = {"a"}
_KINETICS_KEYS = {"m", "rates", "g", "E"}
_SOLVER_KEYS = {"dt_max", "safety", "hazard_samples", "bound_tol", "limit_dt",
                "langevin_dt", "h1_budget"}
_STUDY_KEYS = {"kind", "T", "replicates", "test_functions", "tolerances",
               "level", "cadence", "ensemble", "alpha_n", "want_c2"}
_TESTFN_KEYS = {"sine_modes", "state", "include_constant"}
_TOL_KEYS = {"lln_final", "clt_balance", "n_se"}
_EXEC_KEYS = {"seed", "workers", "out_dir"}
_INITIAL_KEYS = {"u", "p"}
_LEVEL_KEYS = {"compartments", "channels", "lengths"}


def _reject_unknown(doc: dict, allowed: set, where: str):
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in {where}")


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return doc[key]


def validate_config(doc: dict) -> dict:
    """Validate a raw config document; returns a normalized deep copy."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "top level")
    version = _require(doc, "schema_version", "top level")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}; this build reads {SCHEMA_VERSION}")

    model = _require(doc, "model", "top level")
    _reject_unknown(model, _MODEL_KEYS, "model")
    grid = _require(model, "grid", "model")
    _reject_unknown(grid, _GRID_KEYS, "model.grid")
    if int(_require(grid, "N", "model.grid")) < 4:
        raise ConfigError("model.grid.N must be at least 4")
    if float(_require(grid, "L", "model.grid")) <= 0:
        raise ConfigError("model.grid.L must be positive")

    diffusion = model.get("diffusion", {"a": 1.0})
    _reject_unknown(diffusion, _DIFFUSION_KEYS, "model.diffusion")

    kin = _require(model, "kinetics", "model")
    _reject_unknown(kin, _KINETICS_KEYS, "model.kinetics")
    m = int(_require(kin, "m", "model.kinetics"))
    if m < 2:
        raise ConfigError("kinetics needs at least 2 states")
    rates = _require(kin, "rates", "model.kinetics")
    for key, spec in rates.items():
        i, j = _parse_pair(key, m)
        if not isinstance(spec, dict) or "family" not in spec:
            raise ConfigError(f"rate {key!r} must be a family spec")
    g = _require(kin, "g", "model.kinetics")
    E = _require(kin, "E", "model.kinetics")
    if len(g) != m or len(E) != m:
        raise ConfigError("g and E need one entry per state")

    ladder = _require(model, "partition_ladder", "model")
    if not isinstance(ladder, list) or not ladder:
        raise ConfigError("partition_ladder must be a non-empty list")
    for lev in ladder:
        _reject_unknown(lev, _LEVEL_KEYS, "partition_ladder level")

    initial = model.get("initial", {"u": {"kind": "zero"}, "p": {"kind": "uniform"}})
    _reject_unknown(initial, _INITIAL_KEYS, "model.initial")
    _validate_initial_u(initial.get("u", {"kind": "zero"}))
    _validate_initial_p(initial.get("p", {"kind": "uniform"}), m)

    solver = doc.get("solver", {})
    _reject_unknown(solver, _SOLVER_KEYS, "solver")

    study = doc.get("study")
    if study is not None:
        _reject_unknown(study, _STUDY_KEYS, "study")
        kind = _require(study, "kind", "study")
        if kind not in STUDY_KINDS:
            raise ConfigError(f"study.kind must be one of {STUDY_KINDS}")
        reps = int(study.get("replicates", 0))
        if reps < MIN_REPLICATES[kind]:
            raise ConfigError(
                f"study {kind!r} needs at least {MIN_REPLICATES[kind]} replicates, got {reps}")
        if float(study.get("T", 1.0)) <= 0:
            raise ConfigError("study.T must be positive")
        tfn = study.get("test_functions", {})
        _reject_unknown(tfn, _TESTFN_KEYS, "study.test_functions")
        tols = study.get("tolerances", {})
        _reject_unknown(tols, _TOL_KEYS, "study.tolerances")
        for name, val in tols.items():
            if not (float(val) > 0):
                raise ConfigError(f"tolerance {name} must be positive")

    execution = doc.get("execution", {})
    _reject_unknown(execution, _EXEC_KEYS, "execution")
    if int(execution.get("workers", 1)) < 1:
        raise ConfigError("execution.workers must be at least 1")

    return copy.deepcopy(doc)


def _parse_pair(key: str, m: int):
    try:
        left, right = key.split("->")
        i, j = int(left) - 1, int(right) - 1
    except ValueError as exc:
        raise ConfigError(f"rate key {key!r} must look like '1->2'") from exc
    if not (0 <= i < m and 0 <= j < m) or i == j:
        raise ConfigError(f"rate key {key!r} out of range for m={m}")
    return i, j


def _validate_initial_u(spec: dict):
    kind = spec.get("kind")
    if kind == "zero":
        _reject_unknown(spec, {"kind"}, "initial.u")
    elif kind == "constant":
        _reject_unknown(spec, {"kind", "value"}, "initial.u")
    elif kind == "sine":
        _reject_unknown(spec, {"kind", "amplitude", "mode"}, "initial.u")
    else:
        raise ConfigError(f"unknown initial.u kind {kind!r}")


def _validate_initial_p(spec: dict, m: int):
    kind = spec.get("kind")
    if kind == "uniform":
        _reject_unknown(spec, {"kind"}, "initial.p")
    elif kind == "point_mass":
        _reject_unknown(spec, {"kind", "state"}, "initial.p")
        s = int(spec.get("state", 1))
        if not (1 <= s <= m):
            raise ConfigError(f"initial.p.state must be in 1..{m}")
    elif kind == "values":
        _reject_unknown(spec, {"kind", "values"}, "initial.p")
        vals = spec.get("values", [])
        if len(vals) != m or abs(sum(float(v) for v in vals) - 1.0) > 1e-12:
            raise ConfigError("initial.p.values must be m numbers summing to 1")
    else:
        raise ConfigError(f"unknown initial.p kind {kind!r}")


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(doc)


def config_hash(doc: dict) -> str:
    """Stable content hash of the canonical JSON serialization."""
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class ModelBundle:
    """Assembled model objects shared by every runner."""

    doc: dict
    grid: SpatialGrid
    operator: EllipticOperator
    kinetics: ChannelKinetics
    ladder: list            # list[Partition]
    settings: SolverSettings
    limit_dt: float
    langevin_dt: float
    initial_u: np.ndarray   # (N,)
    initial_p: np.ndarray   # (m, N)
    hash: str

    def flow_problem(self, level: int = -1) -> FlowProblem:
        return FlowProblem(self.grid, self.operator, self.kinetics,
                           self.ladder[level], self.settings)

    def limit_problem(self, p_integrator: str = "heun") -> LimitProblem:
        return LimitProblem(self.grid, self.operator, self.kinetics,
                            dt_max=self.limit_dt, bound_tol=self.settings.bound_tol,
                            p_integrator=p_integrator)

    def initial_limit_state(self) -> LimitState:
        return LimitState(self.initial_u.copy(), self.initial_p.copy(), 0.0)

    def initial_hybrid_state(self, level: int = -1) -> HybridState:
        partition = self.ladder[level]
        comp_fracs = np.stack([
            [self.initial_p[i, partition.cell_slice(k)].mean()
             for k in range(partition.n_compartments)]
            for i in range(self.kinetics.m)
        ])
        config = counts_from_fractions(partition, comp_fracs)
        return HybridState(MembraneState(self.initial_u.copy(), 0.0), config)


def build_model(doc: dict) -> ModelBundle:
    """Assemble grid, operator, kinetics, ladder and initial data from a config."""
    doc = validate_config(doc)
    gspec = doc["model"]["grid"]
    grid = SpatialGrid(float(gspec["L"]), int(gspec["N"]))

    aspec = doc["model"].get("diffusion", {"a": 1.0})["a"]
    if isinstance(aspec, (int, float)):
        operator = EllipticOperator.constant(float(aspec), grid)
    else:
        operator = EllipticOperator(np.asarray(aspec, dtype=float))

    kspec = doc["model"]["kinetics"]
    m = int(kspec["m"])
    rate_functions = {
        _parse_pair(key, m): rate_from_dict(spec)
        for key, spec in kspec["rates"].items()
    }
    kinetics = ChannelKinetics(m, rate_functions, np.asarray(kspec["g"], dtype=float),
                               np.asarray(kspec["E"], dtype=float), grid_n=grid.N)

    solver = doc.get("solver", {})
    settings = SolverSettings(
        dt_max=float(solver.get("dt_max", 5e-4)),
        safety=float(solver.get("safety", 0.9)),
        hazard_samples=int(solver.get("hazard_samples", 20)),
        bound_tol=float(solver.get("bound_tol", 1e-9)),
        h1_budget=solver.get("h1_budget"),
    )
    limit_dt = float(solver.get("limit_dt", 1e-3))
    langevin_dt = float(solver.get("langevin_dt", 1e-3))

    tols = (doc.get("study") or {}).get("tolerances", {})
    balance_tol = tols.get("clt_balance")
    ladder = build_partition_ladder(
        grid, doc["model"]["partition_ladder"],
        clt_balance_tol=float(balance_tol) if balance_tol is not None else None)

    initial = doc["model"].get("initial", {"u": {"kind": "zero"}, "p": {"kind": "uniform"}})
    initial_u = _build_initial_u(initial.get("u", {"kind": "zero"}), grid, kinetics)
    initial_p = _build_initial_p(initial.get("p", {"kind": "uniform"}), grid, m)

    return ModelBundle(doc, grid, operator, kinetics, ladder, settings,
                       limit_dt, langevin_dt, initial_u, initial_p, config_hash(doc))


def _build_initial_u(spec: dict, grid: SpatialGrid, kinetics: ChannelKinetics) -> np.ndarray:
    kind = spec["kind"]
    if kind == "zero":
        u = np.zeros(grid.N)
    elif kind == "constant":
        u = np.full(grid.N, float(spec.get("value", 0.0)))
    else:
        amp = float(spec.get("amplitude", 0.1))
        mode = int(spec.get("mode", 1))
        u = amp * np.sin(mode * np.pi * grid.nodes / grid.L)
    if np.min(u) < kinetics.u_minus or np.max(u) > kinetics.u_plus:
        raise ConfigError("initial membrane data violates the pointwise bounds")
    return u


def _build_initial_p(spec: dict, grid: SpatialGrid, m: int) -> np.ndarray:
    kind = spec["kind"]
    if kind == "uniform":
        return np.full((m, grid.N), 1.0 / m)
    if kind == "point_mass":
        p = np.zeros((m, grid.N))
        p[int(spec.get("state", 1)) - 1] = 1.0
        return p
    vals = np.asarray([float(v) for v in spec["values"]])
    return np.repeat(vals[:, None], grid.N, axis=1)
