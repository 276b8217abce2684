"""Channel state schemes: rate-function families and kinetics containers.

Rate functions are declared as named closed-form families, each carrying an
explicit bound and Lipschitz constant over the admissible membrane range
[u_minus, u_plus].  The bound feeds the thinning proposal rate and the
per-configuration absorbing check; the Lipschitz constant feeds the
condition diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, KineticsError, ValidationError

# family codes shared with the numba kernels
FAM_CONSTANT = 0
FAM_AFFINE = 1
FAM_TANH = 2
FAM_EXP = 3
FAM_LINEXP = 4

_FAMILY_NAMES = {
    "constant": FAM_CONSTANT,
    "affine": FAM_AFFINE,
    "tanh": FAM_TANH,
    "exp": FAM_EXP,
    "linexp": FAM_LINEXP,
}


def _linexp_stable(x):
    """x / (1 - exp(-x)) with the removable singularity at 0 handled."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-5
    safe = np.where(small, 1.0, x)
    out = safe / (1.0 - np.exp(-safe))
    series = 1.0 + x / 2.0 + x * x / 12.0
    return np.where(small, series, out)


@dataclass(frozen=True)
class RateFunction:
    """One voltage-dependent transition rate q_ij: R -> R_+.

    params layout per family:
      constant: (c,)               q = c
      affine:   (c0, c1)           q = c0 + c1*v
      tanh:     (base, amp, scale, v0)   q = base + amp*tanh(scale*(v - v0))
      exp:      (a, k, v0)         q = a * exp((v - v0)/k)
      linexp:   (a, k, v0)         q = a*k * x/(1 - exp(-x)),  x = (v - v0)/k
    """

    family: str
    params: tuple

    def __post_init__(self):
        if self.family not in _FAMILY_NAMES:
            raise ConfigError(f"unknown rate family {self.family!r}")

    @property
    def code(self) -> int:
        return _FAMILY_NAMES[self.family]

    def packed_params(self) -> np.ndarray:
        out = np.zeros(4)
        out[: len(self.params)] = self.params
        return out

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        p = self.params
        if self.family == "constant":
            return np.full_like(v, p[0])
        if self.family == "affine":
            return p[0] + p[1] * v
        if self.family == "tanh":
            return p[0] + p[1] * np.tanh(p[2] * (v - p[3]))
        if self.family == "exp":
            return p[0] * np.exp((v - p[2]) / p[1])
        if self.family == "linexp":
            return p[0] * p[1] * _linexp_stable((v - p[2]) / p[1])
        raise KineticsError(f"unhandled family {self.family}")

    # -- metadata over [lo, hi] --------------------------------------------
    def bound(self, lo: float, hi: float) -> float:
        p = self.params
        if self.family == "constant":
            return abs(p[0])
        if self.family == "affine":
            return max(abs(p[0] + p[1] * lo), abs(p[0] + p[1] * hi))
        if self.family == "tanh":
            return abs(p[0]) + abs(p[1])
        if self.family == "exp":
            return float(max(self(lo), self(hi)))
        # monotone in v for a, k > 0; dense sample with a safety margin
        vs = np.linspace(lo, hi, 513)
        return float(np.max(self(vs))) * 1.0001

    def lipschitz(self, lo: float, hi: float) -> float:
        p = self.params
        if self.family == "constant":
            return 0.0
        if self.family == "affine":
            return abs(p[1])
        if self.family == "tanh":
            return abs(p[1] * p[2])
        vs = np.linspace(lo, hi, 1025)
        qs = self(vs)
        return float(np.max(np.abs(np.diff(qs) / np.diff(vs)))) * 1.001

    def as_dict(self) -> dict:
        return {"family": self.family, "params": list(self.params)}


def rate_from_dict(doc: dict) -> RateFunction:
    try:
        return RateFunction(doc["family"], tuple(float(x) for x in doc["params"]))
    except KeyError as exc:
        raise ConfigError(f"rate spec missing key {exc}") from exc


class ChannelKinetics:
    """m channel states with transition rates, conductances and reversal potentials.

    ``rate_functions`` maps 0-based (i, j) pairs (i != j) to RateFunction;
    absent pairs have rate identically zero.  ``g`` is one non-negative
    conductance value per state (scalar, broadcast over the grid) and ``E``
    one reversal potential per state.
    """

    def __init__(self, m: int, rate_functions: dict, g, E, grid_n: int | None = None,
                 spot_check: bool = True):
        self.m = int(m)
        self.rate_functions = dict(rate_functions)
        g = np.asarray(g, dtype=float)
        self.E = np.asarray(E, dtype=float)
        if self.E.shape != (self.m,):
            raise ValidationError("need one reversal potential per state")
        if g.ndim == 1 and g.shape == (self.m,):
            self.g_scalar = g
            self.g_nodes = None if grid_n is None else np.repeat(g[:, None], grid_n, axis=1)
        elif g.ndim == 2 and g.shape[0] == self.m:
            self.g_scalar = None
            self.g_nodes = g
        else:
            raise ValidationError("g must be per-state scalars or a (m, N) field")
        gv = self.g_nodes if self.g_nodes is not None else self.g_scalar
        if np.any(gv < 0):
            raise ValidationError("conductances must be non-negative")
        for (i, j) in self.rate_functions:
            if not (0 <= i < self.m and 0 <= j < self.m and i != j):
                raise ValidationError(f"rate pair ({i}, {j}) out of range for m={self.m}")

        self.u_minus = float(min(0.0, self.E.min()))
        self.u_plus = float(max(0.0, self.E.max()))
        self.pair_bounds = {
            pair: q.bound(self.u_minus, self.u_plus)
            for pair, q in self.rate_functions.items()
        }
        self.qbar = max(self.pair_bounds.values(), default=0.0)
        self.lipschitz = max(
            (q.lipschitz(self.u_minus, self.u_plus) for q in self.rate_functions.values()),
            default=0.0,
        )
        if spot_check:
            self._spot_check()

    def _spot_check(self, n: int = 257):
        vs = np.linspace(self.u_minus, self.u_plus, n)
        for (i, j), q in self.rate_functions.items():
            qv = q(vs)
            if np.any(~np.isfinite(qv)):
                raise KineticsError(f"q_{i+1}{j+1} non-finite on [{self.u_minus}, {self.u_plus}]")
            if np.any(qv < 0):
                v_bad = vs[int(np.argmin(qv))]
                raise KineticsError(f"q_{i+1}{j+1}({v_bad}) = {q(v_bad)} is negative")
            if np.any(qv > self.pair_bounds[(i, j)] * (1 + 1e-12)):
                raise KineticsError(f"q_{i+1}{j+1} exceeds its declared bound")

    def g_on_grid(self, N: int) -> np.ndarray:
        if self.g_nodes is not None:
            if self.g_nodes.shape[1] != N:
                raise ValidationError("conductance field does not match the grid")
            return self.g_nodes
        return np.repeat(self.g_scalar[:, None], N, axis=1)

    def outgoing_bound_per_state(self) -> np.ndarray:
        """Upper bound on the total outgoing rate from each state."""
        out = np.zeros(self.m)
        for (i, _j), b in self.pair_bounds.items():
            out[i] += b
        return out

    def rate_matrix(self, v: float) -> np.ndarray:
        """Generator matrix Q(v) with Q[i, j] = q_ij(v), zero row sums."""
        Q = np.zeros((self.m, self.m))
        for (i, j), q in self.rate_functions.items():
            Q[i, j] = float(q(np.float64(v)))
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, -Q.sum(axis=1))
        return Q

    def packed(self):
        """(pair_row, codes, params) arrays for the numba kernels."""
        pairs = sorted(self.rate_functions)
        pair_row = np.full((self.m, self.m), -1, dtype=np.int64)
        codes = np.zeros(max(len(pairs), 1), dtype=np.int64)
        params = np.zeros((max(len(pairs), 1), 4))
        for row, (i, j) in enumerate(pairs):
            pair_row[i, j] = row
            codes[row] = self.rate_functions[(i, j)].code
            params[row] = self.rate_functions[(i, j)].packed_params()
        return pair_row, codes, params
