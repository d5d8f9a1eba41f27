"""State, measure and action quantizers and the quantized flows built on them.

* :class:`StateGrid` -- a lattice ``S_n`` covering the state box with radius
  ``1/n``; superstates live on ``X_n = PE_N x S_n``, enumerated position-major.
* :func:`quantize_measure` -- nearest type with denominator ``ell`` on the
  probability simplex (rounding followed by a residual repair).
* :class:`ActionNet` -- a finite set of weight tuples, either a per-entry
  lattice or a seeded uniform sample whose prefixes are nested.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .core import ParticleState, SystemConfig, WeightAction, flow_kernel
from .errors import ConfigError, ConsistencyError, InvalidMeasureError
from .transport import DiscreteMeasure, pairwise_cost, transport_plan

Array = np.ndarray

GRID_MODE_MAX_ENTRIES = 12


# ---------------------------------------------------------------------------
# state grid

@dataclass(frozen=True, eq=False)
class StateGrid:
    """Axis-aligned cell-centred lattice over the state box.

    ``points`` are ordered lexicographically by coordinates.  Optional
    ``extra`` points (e.g. the training inputs) are appended after the
    lattice, so lattice points win ties against them.
    """

    level: int
    box: Tuple[Tuple[float, float], ...]
    axes: Tuple[Array, ...]
    points: Array
    n_lattice: int
    N: int

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def n_atoms(self) -> int:
        return self.N * self.size

    @property
    def spacing(self) -> Tuple[float, ...]:
        return tuple((hi - lo) / len(ax) for (lo, hi), ax in zip(self.box, self.axes))

    @property
    def covering_radius(self) -> float:
        """Largest distance from a box point to the lattice."""
        return math.sqrt(sum((h / 2) ** 2 for h in self.spacing))

    def nearest_index(self, x: Array) -> Array:
        """Index of the nearest grid point for each row of ``x`` (shape ``(..., d)``).

        Ties go to the lowest index.  Points outside the box are clamped.
        """
        x = np.asarray(x, dtype=float)
        index = np.zeros(x.shape[:-1], dtype=np.int64)
        for c, ax in enumerate(self.axes):
            k = len(ax)
            xc = x[..., c]
            if k == 1:
                j = np.zeros(xc.shape, dtype=np.int64)
            else:
                h = ax[1] - ax[0]
                j = np.clip(np.floor((xc - ax[0]) / h), 0, k - 2).astype(np.int64)
                upper = np.abs(ax[j + 1] - xc) < np.abs(xc - ax[j])
                j = j + upper
            index = index * k + j
        if self.size > self.n_lattice:
            extra = self.points[self.n_lattice :]
            lat = self.points[index]
            d_lat = np.sum((x - lat) ** 2, axis=-1)
            d_ext = np.sum((x[..., None, :] - extra) ** 2, axis=-1)
            best = np.argmin(d_ext, axis=-1)
            closer = np.take_along_axis(d_ext, best[..., None], axis=-1)[..., 0] < d_lat
            index = np.where(closer, self.n_lattice + best, index)
        return index

    # enumeration of X_n (0-based: atom = position * |S_n| + state)

    def atom_index(self, position: Array, state: Array) -> Array:
        return np.asarray(position) * self.size + np.asarray(state)

    def atom_position(self, atom: Array) -> Array:
        return np.asarray(atom) // self.size

    def atom_state(self, atom: Array) -> Array:
        return np.asarray(atom) % self.size

    def atom_features(self, atom: Array) -> Array:
        return self.points[self.atom_state(atom)]

    def atom_pes(self, atom: Array) -> Array:
        return (self.atom_position(atom) + 1) / self.N

    def describe(self) -> dict:
        return {
            "level": self.level,
            "lattice_points": self.n_lattice,
            "extra_points": self.size - self.n_lattice,
            "per_axis": [len(ax) for ax in self.axes],
        }


def build_state_grid(
    state_box: Sequence[Tuple[float, float]],
    n: int,
    N: int,
    extra_points: Optional[Sequence[Sequence[float]]] = None,
) -> StateGrid:
    """Lattice with per-axis spacing at most ``2 / (n sqrt(d))``.

    Cells are centred so the covering radius is at most ``1/n``.
    """
    if n < 1:
        raise ConfigError("grid level n must be >= 1")
    box = tuple((float(lo), float(hi)) for lo, hi in state_box)
    d = len(box)
    max_h = 2.0 / (n * math.sqrt(d))
    axes = []
    for lo, hi in box:
        k = max(1, math.ceil((hi - lo) / max_h - 1e-12))
        h = (hi - lo) / k
        axes.append(lo + h * (np.arange(k) + 0.5))
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    n_lattice = len(points)
    if extra_points is not None and len(extra_points):
        extra = np.unique(np.asarray(extra_points, dtype=float).reshape(-1, d), axis=0)
        points = np.concatenate([points, extra])
    points.setflags(write=False)
    return StateGrid(n, box, tuple(axes), points, n_lattice, N)


def quantize_state(X: ParticleState, grid: StateGrid) -> ParticleState:
    j = int(grid.nearest_index(np.asarray(X.feature)))
    return ParticleState(X.pe, grid.points[j])


def enumerate_index(a: int, grid_size: int, N: int) -> Tuple[int, int]:
    """1-based atom index -> (1-based position index, 1-based state index)."""
    if not 1 <= a <= N * grid_size:
        raise ConfigError(f"atom index {a} outside 1..{N * grid_size}")
    return (a - 1) // grid_size + 1, (a - 1) % grid_size + 1


def enumerate_inverse(position: int, state: int, grid_size: int, N: int) -> int:
    if not (1 <= position <= N and 1 <= state <= grid_size):
        raise ConfigError(f"({position}, {state}) outside the enumeration")
    return (position - 1) * grid_size + state


def quantize_measure_states(mu: DiscreteMeasure, grid: StateGrid) -> DiscreteMeasure:
    """Push ``mu`` through the nearest-neighbour state quantizer."""
    idx = grid.nearest_index(mu.feature_array())
    atoms = [ParticleState(a.pe, grid.points[j]) for a, j in zip(mu.atoms, idx)]
    return DiscreteMeasure.from_atoms(atoms, mu.masses)


# ---------------------------------------------------------------------------
# measure quantizer

@dataclass(frozen=True)
class QuantizedMeasure:
    """Type ``r_a / ell`` over ``X_n``, stored sparsely.

    ``indices`` are sorted 0-based atom indices with positive counts.
    """

    indices: Tuple[int, ...]
    counts: Tuple[int, ...]
    level: int

    def __post_init__(self):
        if sum(self.counts) != self.level:
            raise InvalidMeasureError(
                f"counts sum to {sum(self.counts)}, expected ell={self.level}"
            )

    @classmethod
    def from_dense(cls, counts: Sequence[int], level: int) -> "QuantizedMeasure":
        counts = np.asarray(counts, dtype=np.int64)
        if np.any(counts < 0):
            raise InvalidMeasureError("negative count")
        nz = np.flatnonzero(counts)
        return cls(tuple(nz.tolist()), tuple(counts[nz].tolist()), level)

    @classmethod
    def from_pairs(cls, pairs, level: int) -> "QuantizedMeasure":
        acc: Dict[int, int] = {}
        for a, c in pairs:
            acc[a] = acc.get(a, 0) + c
        items = sorted((a, c) for a, c in acc.items() if c)
        return cls(tuple(a for a, _ in items), tuple(c for _, c in items), level)

    def dense(self, n_atoms: int) -> Array:
        out = np.zeros(n_atoms, dtype=np.int64)
        out[list(self.indices)] = self.counts
        return out

    def probabilities(self, n_atoms: int) -> Array:
        return self.dense(n_atoms) / self.level

    def to_measure(self, grid: StateGrid) -> DiscreteMeasure:
        atoms = [
            ParticleState(Fraction(int(grid.atom_position(a)) + 1, grid.N), grid.atom_features(a))
            for a in self.indices
        ]
        return DiscreteMeasure.from_atoms(atoms, [Fraction(c, self.level) for c in self.counts])


def quantize_measure(p: Sequence[float], ell: int) -> QuantizedMeasure:
    """Nearest type with denominator ``ell`` in Euclidean distance.

    Round ``ell * p``, then fix the total: when it overshoots, lower the
    coordinates that were rounded up the most; when it undershoots, raise the
    ones rounded down the most.  Ties favour mass at lower indices.
    """
    p = np.asarray(p, dtype=float)
    if ell < 1:
        raise ConfigError("measure level ell must be >= 1")
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidMeasureError("not a probability vector")
    scaled = ell * p
    counts = np.floor(scaled + 0.5).astype(np.int64)
    excess = int(counts.sum()) - ell
    if excess:
        err = counts - scaled
        idx = np.arange(len(p))
        if excess > 0:
            order = np.lexsort((-idx, -err))
            counts[order[:excess]] -= 1
        else:
            order = np.lexsort((idx, err))
            counts[order[:-excess]] += 1
    return QuantizedMeasure.from_dense(counts, ell)


def quantizer_error_bound(n_atoms: int, ell: int) -> float:
    """Worst-case Euclidean distance from a simplex point to its nearest type."""
    half = n_atoms // 2
    return math.sqrt(half * (n_atoms - half) / n_atoms) / ell


def auto_measure_level(n: int, d: int, scale: float = 1.0, multiple: int = 1) -> int:
    """``ell`` of order ``n^(d+1)``, rounded up to a multiple of ``multiple``."""
    raw = math.ceil(scale * n ** (d + 1))
    return multiple * math.ceil(raw / multiple)


def quantize_samples(
    samples: Sequence[Sequence[Sequence[float]]], grid: StateGrid, ell: int
) -> Tuple[QuantizedMeasure, ...]:
    """``R_ell`` of the state-quantized empirical measure of each sample."""
    out = []
    for x in samples:
        x = np.asarray(x, dtype=float)
        N = len(x)
        if N != grid.N:
            raise ConfigError(f"sample of length {N} for a grid built with N={grid.N}")
        atoms = grid.atom_index(np.arange(N), grid.nearest_index(x))
        p = np.zeros(grid.n_atoms)
        np.add.at(p, atoms, 1.0 / N)
        out.append(quantize_measure(p, ell))
    return tuple(out)


# ---------------------------------------------------------------------------
# action nets

@dataclass(frozen=True, eq=False)
class ActionNet:
    actions: Tuple[WeightAction, ...]
    mode: str
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, i):
        return self.actions[i]

    def __iter__(self):
        return iter(self.actions)

    def describe(self) -> dict:
        return {"mode": self.mode, "size": len(self.actions), **self.params}


def build_action_net(
    config: SystemConfig,
    mode: str = "sample",
    *,
    size: Optional[int] = None,
    seed: Optional[int] = None,
    resolution: Optional[int] = None,
) -> ActionNet:
    """Finite action set.

    ``mode="sample"`` draws ``size`` tuples uniformly from the action box with
    a generator seeded by ``seed``; one tuple is drawn at a time, so the net of
    size ``s`` is a prefix of every larger net with the same seed.
    ``mode="grid"`` takes every combination of per-entry values spaced at most
    ``1/resolution`` apart.
    """
    bound = config.action_bound
    n_entries = config.n_weights
    if mode == "sample":
        if size is None or size < 1:
            raise ConfigError("sample mode needs size >= 1")
        rng = np.random.default_rng(seed)
        seen = set()
        actions = []
        for _ in range(size):
            U = WeightAction.from_flat(config, rng.uniform(-bound, bound, n_entries))
            if U not in seen:
                seen.add(U)
                actions.append(U)
        return ActionNet(tuple(actions), "sample", {"seed": seed})
    if mode == "grid":
        if resolution is None or resolution < 1:
            raise ConfigError("grid mode needs resolution m >= 1")
        if n_entries > GRID_MODE_MAX_ENTRIES:
            raise ConfigError(
                f"grid mode over {n_entries} weight entries is intractable; use sample mode"
            )
        k = math.ceil(2 * bound * resolution) + 1
        values = np.linspace(-bound, bound, k)
        actions = tuple(
            WeightAction.from_flat(config, np.array(combo))
            for combo in itertools.product(values, repeat=n_entries)
        )
        return ActionNet(actions, "grid", {"resolution": resolution})
    raise ConfigError(f"unknown action net mode {mode!r}")


# ---------------------------------------------------------------------------
# quantized flows

class PackedEnsemble:
    """Padded array form of K quantized measures, ready for the flow kernel."""

    def __init__(self, measures: Sequence[QuantizedMeasure], grid: StateGrid):
        self.measures = tuple(measures)
        self.grid = grid
        self.level = self.measures[0].level
        width = max(len(m.indices) for m in self.measures)
        K = len(self.measures)
        idx = np.zeros((K, width), dtype=np.int64)
        cnt = np.zeros((K, width), dtype=np.int64)
        for k, m in enumerate(self.measures):
            if m.level != self.level:
                raise ConfigError("ensemble mixes measure levels")
            idx[k, : len(m.indices)] = m.indices
            cnt[k, : len(m.counts)] = m.counts
        self.lengths = [len(m.indices) for m in self.measures]
        self.positions = grid.atom_position(idx)
        self.counts = cnt
        self.features = grid.atom_features(idx)
        self.masses = cnt / self.level

    def step(self, U: WeightAction, config: SystemConfig) -> Tuple[QuantizedMeasure, ...]:
        """Quantized flow ``R_ell o Phi^(n)`` applied to every measure."""
        out = flow_kernel(self.features, self.features, self.masses, U, config.beta, config.act())
        new = self.grid.atom_index(self.positions, self.grid.nearest_index(out))
        result = []
        for k, n in enumerate(self.lengths):
            result.append(
                QuantizedMeasure.from_pairs(
                    zip(new[k, :n].tolist(), self.counts[k, :n].tolist()), self.level
                )
            )
        return tuple(result)


def quantized_step(
    mu: QuantizedMeasure, U: WeightAction, grid: StateGrid, config: SystemConfig
) -> QuantizedMeasure:
    """One layer of the triply quantized model for a single measure.

    The integer counts travel with their atoms, so the image is already a
    type with denominator ``ell``; the measure quantizer must leave it
    unchanged, which is checked here.
    """
    (image,) = PackedEnsemble([mu], grid).step(U, config)
    requantized = quantize_measure(image.probabilities(grid.n_atoms), mu.level)
    if requantized != image:
        raise ConsistencyError("measure quantizer moved an exact type")
    return image


def state_quantized_step(
    mu: DiscreteMeasure, U: WeightAction, grid: StateGrid, config: SystemConfig
) -> DiscreteMeasure:
    """``Phi^(n)``: exact push-forward followed by state quantization of each image."""
    from .lifting import push_forward

    return quantize_measure_states(push_forward(mu, U, config), grid)


def quantized_cost_matrix(grid: StateGrid, lam: float) -> Array:
    """``C[a, b]`` = squared ground cost between atoms a and b of ``X_n``."""
    atoms = np.arange(grid.n_atoms)
    feats = grid.atom_features(atoms)
    pes = grid.atom_pes(atoms)
    return pairwise_cost(feats, pes, feats, pes, lam)


def quantized_wasserstein2_sq(
    mu: QuantizedMeasure, nu: QuantizedMeasure, cost: Array
) -> float:
    """Squared W_{2,lam} between two types, using the precomputed cost matrix."""
    denom = math.lcm(mu.level, nu.level)
    sub = cost[np.ix_(mu.indices, nu.indices)]
    supply = [c * (denom // mu.level) for c in mu.counts]
    demand = [c * (denom // nu.level) for c in nu.counts]
    flow = transport_plan(sub, supply, demand)
    return float(np.sum(flow * sub) / denom)


def quantized_ensemble_cost(
    measures: Sequence[QuantizedMeasure],
    targets: Sequence[QuantizedMeasure],
    cost: Array,
    cache: Optional[dict] = None,
) -> float:
    """Mean squared quantized W_{2,lam} between paired measures.

    ``cache`` maps ``(sample index, measure)`` to its distance.
    """
    if len(measures) != len(targets):
        raise ConfigError("ensemble and target sizes differ")
    total = 0.0
    for k, (mu, nu) in enumerate(zip(measures, targets)):
        if cache is None:
            total += quantized_wasserstein2_sq(mu, nu, cost)
            continue
        key = (k, mu)
        val = cache.get(key)
        if val is None:
            val = cache[key] = quantized_wasserstein2_sq(mu, nu, cost)
        total += val
    return total / len(measures)

