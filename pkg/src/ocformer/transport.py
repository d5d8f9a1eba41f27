"""Exact position-sensitive 2-Wasserstein distances between discrete measures.

The ground cost between superstates ``(p, x)`` and ``(q, y)`` is
``|x - y|^2 + lam * |p - q|^2``.  Masses are kept as integer numerators over a
common denominator, so every transport problem is an integer transportation
problem and optimal plans are exact.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ParticleState
from .errors import ConfigError, InvalidMeasureError

Array = np.ndarray

BRUTEFORCE_MAX_ATOMS = 8


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finitely supported probability measure on superstates.

    Construct through :meth:`from_atoms` or :meth:`empirical`; both return the
    canonical form (atoms sorted, duplicates merged, zero masses dropped,
    numerators and denominator coprime).
    """

    atoms: Tuple[ParticleState, ...]
    numerators: Tuple[int, ...]
    denominator: int

    def __post_init__(self):
        if len(self.atoms) != len(self.numerators):
            raise InvalidMeasureError("atoms and masses differ in length")
        if self.denominator <= 0 or any(r < 0 for r in self.numerators):
            raise InvalidMeasureError("masses must be non-negative")
        if sum(self.numerators) != self.denominator:
            raise InvalidMeasureError(
                f"masses sum to {sum(self.numerators)}/{self.denominator}, not 1"
            )

    @classmethod
    def from_atoms(
        cls, atoms: Iterable[ParticleState], masses: Iterable
    ) -> "DiscreteMeasure":
        """Canonical measure from atoms and rational (or integer-ratio) masses."""
        atoms = list(atoms)
        masses = [Fraction(m) for m in masses]
        if len(atoms) != len(masses):
            raise InvalidMeasureError("atoms and masses differ in length")
        if any(m < 0 for m in masses):
            raise InvalidMeasureError("masses must be non-negative")
        if sum(masses) != 1:
            raise InvalidMeasureError(f"masses sum to {sum(masses)}, not 1")
        merged = {}
        for atom, m in zip(atoms, masses):
            if m:
                merged[atom] = merged.get(atom, 0) + m
        keys = sorted(merged)
        denom = math.lcm(*(merged[k].denominator for k in keys))
        nums = [int(merged[k] * denom) for k in keys]
        return cls(tuple(keys), tuple(nums), denom)

    @classmethod
    def empirical(cls, features: Sequence[Sequence[float]]) -> "DiscreteMeasure":
        """Uniform measure on ``(i/N, x^i)`` for a sequence of N features."""
        n = len(features)
        atoms = [ParticleState(Fraction(i, n), x) for i, x in enumerate(features, 1)]
        return cls.from_atoms(atoms, [Fraction(1, n)] * n)

    def __len__(self):
        return len(self.atoms)

    @property
    def masses(self) -> Tuple[Fraction, ...]:
        return tuple(Fraction(r, self.denominator) for r in self.numerators)

    def mass_array(self) -> Array:
        return np.array([float(m) for m in self.masses])

    def feature_array(self) -> Array:
        return np.array([a.feature for a in self.atoms], dtype=float)

    def pe_array(self) -> Array:
        return np.array([float(a.pe) for a in self.atoms])

    def is_uniform(self) -> bool:
        return len(set(self.numerators)) == 1


@dataclass(frozen=True)
class Coupling:
    """Transport plan ``flow[a, b] / denominator`` between two measures."""

    flow: Array
    denominator: int

    def masses(self):
        return [[Fraction(int(v), self.denominator) for v in row] for row in self.flow]

    def is_feasible(self, P: DiscreteMeasure, Q: DiscreteMeasure) -> bool:
        """Exact check of both marginal equalities."""
        if self.flow.shape != (len(P), len(Q)) or np.any(self.flow < 0):
            return False
        rows = [Fraction(int(s), self.denominator) for s in self.flow.sum(axis=1)]
        cols = [Fraction(int(s), self.denominator) for s in self.flow.sum(axis=0)]
        return rows == list(P.masses) and cols == list(Q.masses)


def pair_cost(X: ParticleState, Y: ParticleState, lam: float) -> float:
    """Squared ground cost ``|x - y|^2 + lam |p - q|^2``."""
    dx = np.asarray(X.feature) - np.asarray(Y.feature)
    dp = float(X.pe - Y.pe)
    return float(dx @ dx + lam * dp * dp)


def cost_matrix(P: DiscreteMeasure, Q: DiscreteMeasure, lam: float) -> Array:
    return pairwise_cost(P.feature_array(), P.pe_array(), Q.feature_array(), Q.pe_array(), lam)


def pairwise_cost(xs: Array, ps: Array, ys: Array, qs: Array, lam: float) -> Array:
    diff = xs[:, None, :] - ys[None, :, :]
    dp = ps[:, None] - qs[None, :]
    return np.sum(diff * diff, axis=-1) + lam * dp * dp


def transport_plan(cost: Array, supply: Sequence[int], demand: Sequence[int]) -> Array:
    """Optimal integer flow for a balanced transportation problem.

    Equal-count problems with equal unit masses go to the Hungarian method;
    everything else is solved by successive shortest paths with Dijkstra
    potentials, which keeps all flows integral.
    """
    supply = np.asarray(supply, dtype=np.int64)
    demand = np.asarray(demand, dtype=np.int64)
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (len(supply), len(demand)):
        raise ConfigError("cost matrix shape does not match marginals")
    if supply.sum() != demand.sum():
        raise InvalidMeasureError("unbalanced transport problem")
    n, m = cost.shape
    if n == m and np.all(supply == supply[0]) and np.all(demand == supply[0]):
        rows, cols = linear_sum_assignment(cost)
        flow = np.zeros((n, m), dtype=np.int64)
        flow[rows, cols] = supply[0]
        return flow
    return _successive_shortest_paths(cost, supply, demand)


def _successive_shortest_paths(cost: Array, supply: Array, demand: Array) -> Array:
    n, m = cost.shape
    flow = np.zeros((n, m), dtype=np.int64)
    left_s = supply.copy()
    left_d = demand.copy()
    pot_s = np.zeros(n)
    pot_t = np.zeros(m)
    while left_s.sum() > 0:
        dist_s = np.where(left_s > 0, 0.0, np.inf)
        dist_t = np.full(m, np.inf)
        prev_t = np.full(m, -1)  # source feeding sink j
        prev_s = np.full(n, -1)  # sink feeding source i along a reverse edge
        done_s = np.zeros(n, dtype=bool)
        done_t = np.zeros(m, dtype=bool)
        target = -1
        while True:
            ds = np.where(done_s, np.inf, dist_s)
            dt = np.where(done_t, np.inf, dist_t)
            i = int(np.argmin(ds))
            j = int(np.argmin(dt))
            if ds[i] <= dt[j]:
                if not np.isfinite(ds[i]):
                    raise InvalidMeasureError("transport problem is infeasible")
                done_s[i] = True
                cand = dist_s[i] + cost[i] + pot_s[i] - pot_t
                better = (cand < dist_t) & ~done_t
                dist_t[better] = cand[better]
                prev_t[better] = i
            else:
                done_t[j] = True
                if left_d[j] > 0:
                    target = j
                    break
                back = flow[:, j] > 0
                cand = dist_t[j] - cost[:, j] + pot_t[j] - pot_s
                better = back & (cand < dist_s) & ~done_s & (left_s == 0)
                dist_s[better] = cand[better]
                prev_s[better] = j
        bound = dist_t[target]
        pot_s += np.minimum(dist_s, bound)
        pot_t += np.minimum(dist_t, bound)

        # walk the path back to a source with spare supply
        path = []
        j = target
        while True:
            i = int(prev_t[j])
            path.append((i, j))
            if prev_s[i] < 0:
                break
            j = int(prev_s[i])
            path.append((i, j, "back"))
        delta = min(left_s[i], left_d[target])
        for step in path:
            if len(step) == 3:
                delta = min(delta, flow[step[0], step[1]])
        for step in path:
            if len(step) == 3:
                flow[step[0], step[1]] -= delta
            else:
                flow[step[0], step[1]] += delta
        left_s[i] -= delta
        left_d[target] -= delta
    return flow


def wasserstein2_sq(
    P: DiscreteMeasure, Q: DiscreteMeasure, lam: float
) -> Tuple[float, Coupling]:
    """Squared W_{2,lam} distance and an optimal coupling."""
    denom = math.lcm(P.denominator, Q.denominator)
    supply = [r * (denom // P.denominator) for r in P.numerators]
    demand = [r * (denom // Q.denominator) for r in Q.numerators]
    cost = cost_matrix(P, Q, lam)
    flow = transport_plan(cost, supply, demand)
    return float(np.sum(flow * cost) / denom), Coupling(flow, denom)


def wasserstein_bruteforce(P: DiscreteMeasure, Q: DiscreteMeasure, lam: float) -> float:
    """Minimum over all permutations; test oracle for uniform measures."""
    n = len(P)
    if len(Q) != n or not (P.is_uniform() and Q.is_uniform()):
        raise ConfigError("brute force needs two uniform measures with equal atom counts")
    if n > BRUTEFORCE_MAX_ATOMS:
        raise ConfigError(f"refusing {n}! permutations (limit {BRUTEFORCE_MAX_ATOMS} atoms)")
    costs = [[pair_cost(x, y, lam) for y in Q.atoms] for x in P.atoms]
    best = min(
        sum(costs[i][s] for i, s in enumerate(perm))
        for perm in itertools.permutations(range(n))
    )
    return best / n


def wasserstein2(P: DiscreteMeasure, Q: DiscreteMeasure, lam: float) -> float:
    return math.sqrt(max(wasserstein2_sq(P, Q, lam)[0], 0.0))

