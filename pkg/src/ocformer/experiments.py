"""Toy self-attention approximation experiment and the robustness study."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import SequenceSample, SystemConfig, WeightAction
from .dp import backward_induction, expand_reachable, extract_open_loop
from .errors import BudgetError, ConfigError
from .lifting import rollout
from .quantization import (
    ActionNet,
    StateGrid,
    build_action_net,
    quantize_measure,
    quantize_samples,
    quantized_cost_matrix,
    quantizer_error_bound,
)
from .transport import DiscreteMeasure, wasserstein2_sq

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("level", "train_error", "test_error", "wall_seconds", "state_count")
ROBUSTNESS_COLUMNS = ("K_r", "seed", "value", "gap", "action_distance")
BENCH_COLUMNS = ("n_atoms", "ell", "samples", "max_error", "mean_error", "bound")


def target_map(inputs: Sequence[Sequence[float]], beta_target: float = 0.3) -> np.ndarray:
    """Self-attention with identity query, key and value maps."""
    x = np.asarray(inputs, dtype=float)
    logits = beta_target * (x @ x.T)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ x


@dataclass(frozen=True)
class DatasetSpec:
    N: int = 4
    d: int = 2
    K_train: int = 35
    K_test: int = 15
    seed: int = 0
    beta_target: float = 0.3

    def __post_init__(self):
        if self.K_train < 1 or self.K_test < 1:
            raise ConfigError("K_train and K_test must be >= 1")


@dataclass
class Dataset:
    spec: DatasetSpec
    state_box: Tuple[Tuple[float, float], ...]
    train: List[SequenceSample]
    test: List[SequenceSample]

    @staticmethod
    def arrays(samples: Sequence[SequenceSample]) -> Tuple[np.ndarray, np.ndarray]:
        return (
            np.array([s.inputs for s in samples], dtype=float),
            np.array([s.labels for s in samples], dtype=float),
        )

    def to_json(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "state_box": [list(b) for b in self.state_box],
            "train": [{"inputs": s.inputs, "labels": s.labels} for s in self.train],
            "test": [{"inputs": s.inputs, "labels": s.labels} for s in self.test],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Dataset":
        def samples(rows):
            return [SequenceSample(r["inputs"], r["labels"]) for r in rows]

        return cls(
            DatasetSpec(**data["spec"]),
            tuple(tuple(b) for b in data["state_box"]),
            samples(data["train"]),
            samples(data["test"]),
        )


def draw_inputs(
    rng: np.random.Generator, K: int, N: int, state_box: Sequence[Tuple[float, float]]
) -> np.ndarray:
    lo = np.array([b[0] for b in state_box])
    hi = np.array([b[1] for b in state_box])
    return lo + (hi - lo) * rng.random((K, N, len(state_box)))


def generate_dataset(spec: DatasetSpec, state_box: Sequence[Tuple[float, float]]) -> Dataset:
    """Uniform inputs from the state box labelled by :func:`target_map`."""
    if len(state_box) != spec.d:
        raise ConfigError("state box dimension differs from the dataset's d")
    rng = np.random.default_rng(spec.seed)
    train = draw_inputs(rng, spec.K_train, spec.N, state_box)
    test = draw_inputs(rng, spec.K_test, spec.N, state_box)

    def label(xs):
        return [SequenceSample(x, target_map(x, spec.beta_target)) for x in xs]

    return Dataset(spec, tuple(tuple(b) for b in state_box), label(train), label(test))


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    policy: object
    reach: object
    value: float
    wall_seconds: float

    @property
    def actions(self) -> Tuple[WeightAction, ...]:
        return self.policy.actions


def train(
    inputs: np.ndarray,
    labels: np.ndarray,
    net: ActionNet,
    grid: StateGrid,
    ell: int,
    config: SystemConfig,
    cost: Optional[np.ndarray] = None,
    budget: Optional[int] = None,
) -> TrainResult:
    """Quantize the data, expand, run the backward pass, extract weights."""
    if cost is None:
        cost = quantized_cost_matrix(grid, config.lam)
    start = time.perf_counter()
    initial = quantize_samples(inputs, grid, ell)
    targets = quantize_samples(labels, grid, ell)
    reach = expand_reachable(initial, net, grid, config, budget=budget)
    closed = backward_induction(reach, targets, cost)
    policy = extract_open_loop(closed, reach)
    wall = time.perf_counter() - start
    return TrainResult(policy, reach, policy.value, wall)


def exact_error(
    inputs: np.ndarray, labels: np.ndarray, actions: Sequence[WeightAction], config: SystemConfig
) -> float:
    """Lifted terminal cost under the unquantized flow."""
    P = DoubleLiftedDistribution.from_samples(inputs, labels)
    return evaluate_double_lifted(P, actions, config)


def run_training_sweep(
    config: SystemConfig,
    dataset: Dataset,
    grid: StateGrid,
    ell: int,
    levels: Sequence[int],
    seed: int,
    budget: Optional[int] = None,
) -> List[dict]:
    """Train at each action level with nested sampled nets.

    The net at level ``M`` is the first ``M`` draws of one seeded stream, so
    each level extends the previous one.
    """
    levels = list(levels)
    if levels != sorted(levels) or len(set(levels)) != len(levels):
        raise ConfigError("levels must be strictly increasing")
    full = build_action_net(config, "sample", size=max(levels), seed=seed)
    cost = quantized_cost_matrix(grid, config.lam)
    x_tr, y_tr = Dataset.arrays(dataset.train)
    x_te, y_te = Dataset.arrays(dataset.test)
    rows = []
    for M in levels:
        net = ActionNet(full.actions[:M], "sample", {"seed": seed})
        try:
            res = train(x_tr, y_tr, net, grid, ell, config, cost, budget)
        except BudgetError as exc:
            raise BudgetError(f"action level {M}: {exc}", stage=exc.stage) from exc
        test_err = exact_error(x_te, y_te, res.actions, config)
        rows.append(
            {
                "level": M,
                "train_error": res.value,
                "test_error": test_err,
                "wall_seconds": res.wall_seconds,
                "state_count": sum(res.reach.state_counts),
            }
        )
        log.info("level %d: train %.6f test %.6f (%.1fs)", M, res.value, test_err, res.wall_seconds)
    return rows


def quadratic_fit(x: Sequence[float], y: Sequence[float]) -> Tuple[np.ndarray, float]:
    """Least-squares quadratic coefficients (highest power first) and R^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    coef = np.polyfit(x, y, 2)
    resid = y - np.polyval(coef, x)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return coef, float(1.0 - np.sum(resid**2) / ss_tot)


# ---------------------------------------------------------------------------
# double lifting

@dataclass(frozen=True)
class DoubleLiftedDistribution:
    """Finitely supported law over (input measure, target measure) pairs."""

    pairs: Tuple[Tuple[DiscreteMeasure, DiscreteMeasure], ...]
    weights: Tuple[Fraction, ...]

    def __post_init__(self):
        if len(self.pairs) != len(self.weights) or not self.pairs:
            raise ConfigError("need one weight per pair")
        if any(w < 0 for w in self.weights) or sum(self.weights) != 1:
            raise ConfigError("pair weights must be non-negative and sum to 1")

    @classmethod
    def from_samples(cls, inputs, labels) -> "DoubleLiftedDistribution":
        pairs = tuple(
            (DiscreteMeasure.empirical(x), DiscreteMeasure.empirical(y))
            for x, y in zip(inputs, labels)
        )
        return cls(pairs, tuple(Fraction(1, len(pairs)) for _ in pairs))


def evaluate_double_lifted(
    P: DoubleLiftedDistribution, seq: Sequence[WeightAction], config: SystemConfig
) -> float:
    """``sum_j w_j W_{2,lam}(Phi_T(mu_j), nu_j)^2`` under the exact flow."""
    from .lifting import EnsembleState

    inputs = EnsembleState(tuple(mu for mu, _ in P.pairs))
    final = rollout(inputs, seq, config)
    total = 0.0
    for w, mu_T, (_, nu) in zip(P.weights, final, P.pairs):
        total += float(w) * wasserstein2_sq(mu_T, nu, config.lam)[0]
    return total


def sequence_distance(a: Sequence[WeightAction], b: Sequence[WeightAction]) -> float:
    return math.sqrt(sum(u.distance(v) ** 2 for u, v in zip(a, b)))


def robustness_study(
    config: SystemConfig,
    spec: DatasetSpec,
    state_box: Sequence[Tuple[float, float]],
    grid: StateGrid,
    ell: int,
    net: ActionNet,
    sizes: Sequence[int],
    seeds: Sequence[int],
    truth_size: int = 200,
    truth_seed: int = 10_000,
    truth: Optional[DoubleLiftedDistribution] = None,
    budget: Optional[int] = None,
) -> List[dict]:
    """Train on growing empirical samples and score on a fixed truth proxy.

    The truth is either given or drawn as ``truth_size`` fresh samples.  For
    each seed and size ``K_r`` an independent training set is drawn, trained
    with the same net, and its weights evaluated on the truth.  The gap is
    measured against the best value seen anywhere in the study.
    """
    if truth is None:
        rng = np.random.default_rng(truth_seed)
        x = draw_inputs(rng, truth_size, spec.N, state_box)
        y = np.array([target_map(s, spec.beta_target) for s in x])
        truth = DoubleLiftedDistribution.from_samples(x, y)
    cost = quantized_cost_matrix(grid, config.lam)
    rows = []
    for seed in seeds:
        previous = None
        for K in sizes:
            rng = np.random.default_rng([seed, K])
            x = draw_inputs(rng, K, spec.N, state_box)
            y = np.array([target_map(s, spec.beta_target) for s in x])
            res = train(x, y, net, grid, ell, config, cost, budget)
            value = evaluate_double_lifted(truth, res.actions, config)
            dist = float("nan") if previous is None else sequence_distance(previous, res.actions)
            previous = res.actions
            rows.append({"K_r": K, "seed": seed, "value": value, "gap": 0.0, "action_distance": dist})
            log.info("K=%d seed=%d value=%.6f", K, seed, value)
    best = min(r["value"] for r in rows)
    for r in rows:
        r["gap"] = r["value"] - best
    return rows


def mean_gap_by_size(rows: Iterable[dict]) -> List[Tuple[int, float]]:
    sums = {}
    for r in rows:
        s, c = sums.get(r["K_r"], (0.0, 0))
        sums[r["K_r"]] = (s + r["gap"], c + 1)
    return [(K, s / c) for K, (s, c) in sorted(sums.items())]


# ---------------------------------------------------------------------------
# measure quantizer benchmark

def quantizer_bench(
    atom_counts: Sequence[int], ells: Sequence[int], samples: int, seed: int = 0
) -> List[dict]:
    """Empirical Euclidean error of the measure quantizer against its bound."""
    rng = np.random.default_rng(seed)
    rows = []
    for m in atom_counts:
        points = rng.dirichlet(np.ones(m), size=samples)
        for ell in ells:
            errs = [
                float(np.linalg.norm(p - quantize_measure(p, ell).probabilities(m)))
                for p in points
            ]
            rows.append(
                {
                    "n_atoms": m,
                    "ell": ell,
                    "samples": samples,
                    "max_error": max(errs),
                    "mean_error": float(np.mean(errs)),
                    "bound": quantizer_error_bound(m, ell),
                }
            )
    return rows


def write_csv(rows: Sequence[dict], columns: Sequence[str], stream=None) -> str:
    """Write rows with a fixed header; floats in round-trip ``repr`` form."""
    buf = io.StringIO() if stream is None else stream
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue() if stream is None else ""
