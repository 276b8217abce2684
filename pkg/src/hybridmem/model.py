"""Spatial grid, compartment partitions and channel configurations.

The spatial domain is the interval (0, L) discretized by a cell-centered
grid: N cells of width h = L/N with nodes at the cell midpoints and
midpoint-rule quadrature (weight h per node).  Homogeneous Dirichlet
boundary values at x = 0 and x = L are implicit (not stored).

A partition splits the cells into contiguous compartments, each holding a
fixed number of channels.  Channel bookkeeping is per compartment and per
channel state; the occupancy fractions form the piecewise-constant
coordinate fields that couple the jump dynamics to the membrane PDE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import KineticsError, ResolutionError, ValidationError


@dataclass(frozen=True)
class SpatialGrid:
    """Cell-centered grid on (0, L) with midpoint quadrature."""

    L: float
    N: int

    def __post_init__(self):
        if self.N < 4:
            raise ValidationError(f"grid needs at least 4 cells, got N={self.N}")
        if not (self.L > 0 and np.isfinite(self.L)):
            raise ValidationError(f"domain length must be positive, got L={self.L}")

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def nodes(self) -> np.ndarray:
        """Cell midpoints, strictly increasing, interior to (0, L)."""
        return (np.arange(self.N) + 0.5) * self.h

    @property
    def weights(self) -> np.ndarray:
        """Midpoint quadrature weights; sum equals L to machine precision."""
        return np.full(self.N, self.h)

    def integrate(self, values: np.ndarray) -> float:
        """Midpoint-rule integral over (0, L) along the last axis."""
        return float(np.sum(values * self.h)) if values.ndim == 1 else np.sum(values * self.h, axis=-1)


class Partition:
    """Contiguous compartments over grid cells with per-compartment channel counts.

    ``cell_offsets`` has length K+1; compartment k covers cells
    [cell_offsets[k], cell_offsets[k+1]).  ``channels[k] == 0`` marks an
    empty compartment; all channel logic skips those.
    """

    def __init__(self, grid: SpatialGrid, cell_offsets, channels):
        self.grid = grid
        self.cell_offsets = np.asarray(cell_offsets, dtype=np.int64)
        self.channels = np.asarray(channels, dtype=np.int64)
        self._validate()
        # map node index -> compartment index, used by the flow kernels
        self.node_to_comp = np.repeat(
            np.arange(self.n_compartments, dtype=np.int64), np.diff(self.cell_offsets)
        )

    def _validate(self):
        off = self.cell_offsets
        if off.ndim != 1 or len(off) < 2:
            raise ValidationError("cell_offsets must list at least one compartment")
        if off[0] != 0 or off[-1] != self.grid.N:
            raise ValidationError("compartments must cover all grid cells")
        if np.any(np.diff(off) < 1):
            raise ValidationError("compartment cell ranges must be non-empty and disjoint")
        if len(self.channels) != len(off) - 1:
            raise ValidationError("need one channel count per compartment")
        if np.any(self.channels < 0):
            raise ValidationError("channel counts must be non-negative")
        if not np.any(self.channels > 0):
            raise ValidationError("at least one compartment must hold channels")

    @property
    def n_compartments(self) -> int:
        return len(self.channels)

    @property
    def cells_per_compartment(self) -> np.ndarray:
        return np.diff(self.cell_offsets)

    @property
    def lengths(self) -> np.ndarray:
        """Lebesgue measure |D_k| of every compartment."""
        return self.cells_per_compartment * self.grid.h

    @property
    def nonempty(self) -> np.ndarray:
        return np.flatnonzero(self.channels > 0)

    # -- ladder statistics (over non-empty compartments) -------------------
    @property
    def delta_plus(self) -> float:
        """Maximal diameter (= length in d=1) of non-empty compartments."""
        return float(np.max(self.lengths[self.nonempty]))

    @property
    def nu_plus(self) -> float:
        return float(np.max(self.lengths[self.nonempty]))

    @property
    def nu_minus(self) -> float:
        return float(np.min(self.lengths[self.nonempty]))

    @property
    def ell_plus(self) -> int:
        return int(np.max(self.channels[self.nonempty]))

    @property
    def ell_minus(self) -> int:
        return int(np.min(self.channels[self.nonempty]))

    @property
    def balance_ratio(self) -> float:
        """ell_- nu_- / (ell_+ nu_+); equals 1 for balanced partitions."""
        return (self.ell_minus * self.nu_minus) / (self.ell_plus * self.nu_plus)

    @property
    def alpha(self) -> float:
        """Fluctuation rescaling factor ell_-/nu_+."""
        return self.ell_minus / self.nu_plus

    @property
    def total_channels(self) -> int:
        return int(np.sum(self.channels))

    def cell_slice(self, k: int) -> slice:
        return slice(int(self.cell_offsets[k]), int(self.cell_offsets[k + 1]))

    def indicator_pairings(self, values: np.ndarray) -> np.ndarray:
        """<phi, 1_{D_k}> for a grid function phi, for every compartment k."""
        values = np.asarray(values, dtype=float)
        sums = np.add.reduceat(values, self.cell_offsets[:-1])
        return sums * self.grid.h

    def __repr__(self):
        return (f"Partition(K={self.n_compartments}, delta+={self.delta_plus:.4g}, "
                f"l-={self.ell_minus}, l+={self.ell_plus})")


def uniform_partition(grid: SpatialGrid, n_compartments: int, channels_each: int) -> Partition:
    """Equal-size compartments (up to one-cell rounding) with equal channel counts."""
    if n_compartments < 1:
        raise ValidationError("need at least one compartment")
    offsets = np.round(np.linspace(0, grid.N, n_compartments + 1)).astype(np.int64)
    if np.any(np.diff(offsets) < 1):
        raise ResolutionError(
            f"{n_compartments} compartments do not fit on a grid of {grid.N} cells"
        )
    return Partition(grid, offsets, np.full(n_compartments, channels_each, dtype=np.int64))


def partition_from_lengths(grid: SpatialGrid, lengths, channels) -> Partition:
    """Compartments with prescribed lengths (as fractions of L), snapped to cell boundaries."""
    lengths = np.asarray(lengths, dtype=float)
    if abs(lengths.sum() - grid.L) > 1e-9 * grid.L:
        raise ValidationError("compartment lengths must sum to the domain length")
    bounds = np.concatenate([[0.0], np.cumsum(lengths)])
    offsets = np.round(bounds / grid.h).astype(np.int64)
    offsets[-1] = grid.N
    if np.any(np.diff(offsets) < 1):
        raise ResolutionError("a requested compartment is below one grid cell")
    snapped = np.max(np.abs(offsets * grid.h - bounds))
    if snapped > 0.5 * grid.h + 1e-12:
        raise ResolutionError("compartment boundaries do not snap to grid cells")
    return Partition(grid, offsets, np.asarray(channels, dtype=np.int64))


def build_partition_ladder(grid: SpatialGrid, levels, clt_balance_tol: float | None = None):
    """Build a refinement ladder of partitions.

    ``levels`` is a sequence of level specs, each either a ``(compartments,
    channels)`` tuple, ``{"compartments": k, "channels": l}``, or
    ``{"lengths": [...], "channels": [...]}`` for non-uniform levels.

    Requires max diameter strictly decreasing and min channel count strictly
    increasing across levels (single-level ladders are exempt).  With
    ``clt_balance_tol`` set, every level's balance ratio must lie within
    that tolerance of 1.
    """
    parts = []
    for spec in levels:
        if isinstance(spec, dict):
            if "lengths" in spec:
                part = partition_from_lengths(grid, spec["lengths"], spec["channels"])
            else:
                part = uniform_partition(grid, int(spec["compartments"]), int(spec["channels"]))
        else:
            n_comp, n_chan = spec
            part = uniform_partition(grid, int(n_comp), int(n_chan))
        if np.any(part.cells_per_compartment[part.nonempty] < 2):
            raise ResolutionError(
                "non-empty compartments need at least 2 grid cells at this level"
            )
        parts.append(part)

    for a, b in zip(parts, parts[1:]):
        if not b.delta_plus < a.delta_plus:
            raise ValidationError(
                f"ladder inconsistent: delta+ not decreasing ({a.delta_plus} -> {b.delta_plus})"
            )
        if not b.ell_minus > a.ell_minus:
            raise ValidationError(
                f"ladder inconsistent: ell- not increasing ({a.ell_minus} -> {b.ell_minus})"
            )
    if clt_balance_tol is not None:
        for i, p in enumerate(parts):
            if abs(p.balance_ratio - 1.0) > clt_balance_tol:
                raise ValidationError(
                    f"level {i} balance ratio {p.balance_ratio:.4g} violates the "
                    f"CLT tolerance {clt_balance_tol}"
                )
    return parts


@dataclass
class ChannelConfiguration:
    """Non-negative channel counts per compartment and per state.

    ``counts[i, k]`` is the number of channels in compartment k currently in
    state i.  Column sums are conserved (one channel switches state per
    jump, channels are never created or destroyed).
    """

    counts: np.ndarray  # (m, K) int64

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ValidationError("counts must be a (states, compartments) array")
        if np.any(self.counts < 0):
            raise ValidationError("channel counts must be non-negative")

    @property
    def m(self) -> int:
        return self.counts.shape[0]

    def validate_against(self, partition: Partition):
        per_comp = self.counts.sum(axis=0)
        if self.counts.shape[1] != partition.n_compartments:
            raise ValidationError("configuration does not match the partition")
        if not np.array_equal(per_comp, partition.channels):
            bad = np.flatnonzero(per_comp != partition.channels)
            raise ValidationError(
                f"channel number not conserved in compartments {bad.tolist()}"
            )

    def copy(self) -> "ChannelConfiguration":
        return ChannelConfiguration(self.counts.copy())

    def apply_event(self, k: int, i: int, j: int):
        """Move one channel in compartment k from state i to state j, in place."""
        if self.counts[i, k] <= 0:
            raise ValidationError(f"no channel in state {i} of compartment {k} to move")
        self.counts[i, k] -= 1
        self.counts[j, k] += 1


def counts_from_fractions(partition: Partition, fractions: np.ndarray) -> ChannelConfiguration:
    """Best integer channel configuration matching target occupancy fractions.

    ``fractions`` is (m, K) (or (m,) for spatially uniform targets); each
    compartment distributes its l(k) channels by largest remainder so the
    column sums are exact.
    """
    fractions = np.asarray(fractions, dtype=float)
    K = partition.n_compartments
    if fractions.ndim == 1:
        fractions = np.repeat(fractions[:, None], K, axis=1)
    m = fractions.shape[0]
    counts = np.zeros((m, K), dtype=np.int64)
    for k in range(K):
        l = int(partition.channels[k])
        if l == 0:
            continue
        target = fractions[:, k] * l
        base = np.floor(target).astype(np.int64)
        leftover = l - int(base.sum())
        order = np.argsort(-(target - base), kind="stable")
        base[order[:leftover]] += 1
        counts[:, k] = base
    return ChannelConfiguration(counts)


class CoordinateField:
    """Piecewise-constant occupancy fractions z_i, one value per compartment."""

    def __init__(self, values: np.ndarray, partition: Partition):
        self.values = np.asarray(values, dtype=float)  # (m, K)
        self.partition = partition
        if self.values.shape[1] != partition.n_compartments:
            raise ValidationError("coordinate field does not match the partition")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def on_grid(self) -> np.ndarray:
        """Expand to nodewise values, shape (m, N)."""
        return self.values[:, self.partition.node_to_comp]

    def validate(self):
        v = self.values
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise ValidationError("occupancy fractions must lie in [0, 1]")
        occupied = self.partition.nonempty
        sums = v[:, occupied].sum(axis=0)
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise ValidationError("occupancy fractions must sum to 1 on occupied compartments")
        empty = np.setdiff1d(np.arange(self.partition.n_compartments), occupied)
        if len(empty) and np.any(v[:, empty] != 0.0):
            raise ValidationError("occupancy must vanish on empty compartments")


def coordinate_field(config: ChannelConfiguration, partition: Partition) -> CoordinateField:
    """Occupancy fractions counts[i,k] / l(k) as a piecewise-constant field."""
    config.validate_against(partition)
    values = np.zeros(config.counts.shape, dtype=float)
    occ = partition.nonempty
    values[:, occ] = config.counts[:, occ] / partition.channels[occ]
    return CoordinateField(values, partition)


def compartment_average(u: np.ndarray, k: int, partition: Partition) -> float:
    """Average of a grid function over compartment k.

    Uses an anchored mean (first node as offset) so constants are
    reproduced exactly.
    """
    sl = partition.cell_slice(k)
    if sl.stop <= sl.start:
        raise ValidationError(f"compartment {k} has an empty cell range")
    seg = np.asarray(u, dtype=float)[sl]
    return float(seg[0] + np.sum(seg - seg[0]) / len(seg))


def compartment_averages(u: np.ndarray, partition: Partition) -> np.ndarray:
    """Anchored mean of u over every compartment, shape (K,)."""
    u = np.asarray(u, dtype=float)
    out = np.empty(partition.n_compartments)
    for k in range(partition.n_compartments):
        sl = partition.cell_slice(k)
        seg = u[sl]
        out[k] = seg[0] + np.sum(seg - seg[0]) / len(seg)
    return out


@dataclass
class RateTable:
    """All jump events (k, i->j) with their instantaneous rates.

    ``rates[k, i, j]`` is counts[i,k] * q_ij(avg_k(u)); the total rate is
    the plain sum of the table in C order.
    """

    rates: np.ndarray          # (K, m, m), zero diagonal
    averages: np.ndarray       # (K,) compartment averages of u used
    total: float = field(init=False)

    def __post_init__(self):
        self.total = float(np.sum(self.rates))

    def entries(self):
        """Iterate non-zero events as (k, i, j, rate)."""
        K, m, _ = self.rates.shape
        for k in range(K):
            for i in range(m):
                for j in range(m):
                    if i != j and self.rates[k, i, j] != 0.0:
                        yield k, i, j, float(self.rates[k, i, j])


def jump_event_rates(state, kinetics, partition: Partition) -> RateTable:
    """Rate table for a hybrid state (membrane u plus channel configuration).

    ``state`` may be a HybridState or any object with ``membrane.u`` and
    ``config`` attributes.  Raises KineticsError when a rate comes out
    negative or non-finite, naming the offending pair and argument.
    """
    u = state.membrane.u
    counts = state.config.counts
    avgs = compartment_averages(u, partition)
    K = partition.n_compartments
    m = kinetics.m
    rates = np.zeros((K, m, m))
    for (i, j), q in kinetics.rate_functions.items():
        qv = q(avgs)
        bad = ~np.isfinite(qv) | (qv < 0.0)
        if np.any(bad):
            k_bad = int(np.flatnonzero(bad)[0])
            raise KineticsError(
                f"rate q_{i+1}{j+1}({avgs[k_bad]!r}) evaluated to {qv[k_bad]!r}"
            )
        rates[:, i, j] = counts[i, :] * qv
    return RateTable(rates=rates, averages=avgs)
