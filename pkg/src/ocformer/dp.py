"""Backward dynamic programming over the triply quantized ensemble MDP.

The state is the tuple of K quantized measures (one per training sample), the
actions are the members of an action net, and the dynamics are deterministic.
Only ensembles reachable from the quantized training data are enumerated.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import SystemConfig, WeightAction
from .errors import BudgetError, ConfigError, ConsistencyError
from .lifting import EnsembleState, rollout, terminal_cost
from .quantization import (
    ActionNet,
    PackedEnsemble,
    QuantizedMeasure,
    StateGrid,
    quantize_measure_states,
    quantize_samples,
    quantized_ensemble_cost,
    state_quantized_step,
)
from .transport import DiscreteMeasure, wasserstein2_sq

log = logging.getLogger(__name__)

EnsembleKey = Tuple[QuantizedMeasure, ...]

POLICY_FORMAT = "ocformer-policy"
POLICY_VERSION = 1
MODELS = ("exact", "state-quantized", "triply-quantized")


def ensemble_key(measures: Sequence[QuantizedMeasure]) -> EnsembleKey:
    return tuple(measures)


@dataclass
class ReachableSets:
    """Ensembles reachable at each stage and the transition table.

    ``transitions[t][key][a]`` is the successor of ``key`` under action ``a``
    of ``nets[t]``.
    """

    stages: List[List[EnsembleKey]]
    transitions: List[Dict[EnsembleKey, Tuple[EnsembleKey, ...]]]
    nets: List[ActionNet]

    @property
    def horizon(self) -> int:
        return len(self.transitions)

    @property
    def initial(self) -> EnsembleKey:
        return self.stages[0][0]

    @property
    def state_counts(self) -> List[int]:
        return [len(s) for s in self.stages]


@dataclass
class ClosedLoopPolicy:
    """Greedy action index and cost-to-go for every reachable (stage, ensemble)."""

    actions: List[Dict[EnsembleKey, int]]
    values: List[Dict[EnsembleKey, float]]

    def value(self, key: EnsembleKey, t: int = 0) -> float:
        return self.values[t][key]


@dataclass
class OpenLoopPolicy:
    """Fixed weight sequence obtained by replaying a closed-loop policy."""

    actions: Tuple[WeightAction, ...]
    action_indices: Tuple[int, ...]
    initial: EnsembleKey
    nets: List[dict]
    value: float
    trajectory: Tuple[EnsembleKey, ...] = field(repr=False, default=())


def _stage_nets(nets: Union[ActionNet, Sequence[ActionNet]], T: int) -> List[ActionNet]:
    if isinstance(nets, ActionNet):
        return [nets] * T
    nets = list(nets)
    if len(nets) != T:
        raise ConfigError(f"{len(nets)} action nets for horizon T={T}")
    return nets


def expand_reachable(
    initial: Sequence[QuantizedMeasure],
    nets: Union[ActionNet, Sequence[ActionNet]],
    grid: StateGrid,
    config: SystemConfig,
    T: Optional[int] = None,
    budget: Optional[int] = None,
) -> ReachableSets:
    """Breadth-first enumeration of the ensembles reachable from ``initial``.

    ``budget`` caps the number of distinct ensembles at any single stage.
    """
    T = config.T if T is None else T
    nets = _stage_nets(nets, T)
    interned: Dict[QuantizedMeasure, QuantizedMeasure] = {}
    key0 = tuple(interned.setdefault(m, m) for m in initial)
    stages = [[key0]]
    transitions = []
    for t in range(T):
        table: Dict[EnsembleKey, Tuple[EnsembleKey, ...]] = {}
        seen: Dict[EnsembleKey, EnsembleKey] = {}
        for key in stages[t]:
            packed = PackedEnsemble(key, grid)
            successors = []
            for U in nets[t]:
                nxt = tuple(interned.setdefault(m, m) for m in packed.step(U, config))
                nxt = seen.setdefault(nxt, nxt)
                successors.append(nxt)
            table[key] = tuple(successors)
            if budget is not None and len(seen) > budget:
                raise BudgetError(
                    f"stage {t + 1} exceeds the budget of {budget} ensembles", stage=t + 1
                )
        transitions.append(table)
        stages.append(list(seen))
        log.debug("stage %d: %d ensembles", t + 1, len(seen))
    return ReachableSets(stages, transitions, nets)


def backward_induction(
    reach: ReachableSets,
    targets: Sequence[QuantizedMeasure],
    cost: np.ndarray,
) -> ClosedLoopPolicy:
    """Solve the finite-horizon recursion on the reachable sets.

    Terminal values are mean squared quantized Wasserstein distances to the
    targets; earlier values minimise over the stage's net, ties resolved to
    the lowest action index.
    """
    T = reach.horizon
    cache: dict = {}
    values: List[Dict[EnsembleKey, float]] = [dict() for _ in range(T + 1)]
    actions: List[Dict[EnsembleKey, int]] = [dict() for _ in range(T)]
    for key in reach.stages[T]:
        values[T][key] = quantized_ensemble_cost(key, targets, cost, cache)
    for t in range(T - 1, -1, -1):
        later = values[t + 1]
        for key in reach.stages[t]:
            successors = reach.transitions[t].get(key)
            if successors is None:
                raise ConsistencyError(f"no transitions recorded for a stage-{t} ensemble")
            best_a, best_v = -1, np.inf
            for a, nxt in enumerate(successors):
                try:
                    v = later[nxt]
                except KeyError:
                    raise ConsistencyError(f"successor missing from stage {t + 1}") from None
                if v < best_v:
                    best_a, best_v = a, v
            actions[t][key] = best_a
            values[t][key] = best_v
    return ClosedLoopPolicy(actions, values)


def extract_open_loop(
    policy: ClosedLoopPolicy,
    reach: ReachableSets,
    initial: Optional[EnsembleKey] = None,
) -> OpenLoopPolicy:
    """Replay the greedy closed-loop actions from ``initial``."""
    key = reach.initial if initial is None else tuple(initial)
    start = key
    chosen, weights, path = [], [], [key]
    for t in range(reach.horizon):
        a = policy.actions[t][key]
        chosen.append(a)
        weights.append(reach.nets[t][a])
        key = reach.transitions[t][key][a]
        path.append(key)
    return OpenLoopPolicy(
        actions=tuple(weights),
        action_indices=tuple(chosen),
        initial=start,
        nets=[net.describe() for net in reach.nets],
        value=policy.values[0][start],
        trajectory=tuple(path),
    )


def quantized_rollout(
    initial: Sequence[QuantizedMeasure],
    seq: Sequence[WeightAction],
    grid: StateGrid,
    config: SystemConfig,
) -> EnsembleKey:
    key = tuple(initial)
    for U in seq:
        key = PackedEnsemble(key, grid).step(U, config)
    return tuple(key)


def evaluate_sequence(
    inputs: Sequence,
    labels: Sequence,
    seq: Sequence[WeightAction],
    model: str,
    config: SystemConfig,
    grid: Optional[StateGrid] = None,
    ell: Optional[int] = None,
    cost: Optional[np.ndarray] = None,
) -> float:
    """Terminal cost of a fixed action sequence under one of three models.

    ``exact`` is the unquantized lifted flow; ``state-quantized`` snaps every
    atom to the grid after each layer (and at the start) but keeps exact
    masses and unquantized targets; ``triply-quantized`` additionally works
    with types of denominator ``ell`` and quantized targets, exactly as the
    dynamic program does.
    """
    if model == "exact":
        E0 = EnsembleState.from_features(inputs)
        return terminal_cost(rollout(E0, seq, config), EnsembleState.from_features(labels), config.lam)
    if grid is None:
        raise ConfigError(f"model {model!r} needs a state grid")
    if model == "state-quantized":
        total = 0.0
        for x, y in zip(inputs, labels):
            mu = quantize_measure_states(DiscreteMeasure.empirical(x), grid)
            for U in seq:
                mu = state_quantized_step(mu, U, grid, config)
            total += wasserstein2_sq(mu, DiscreteMeasure.empirical(y), config.lam)[0]
        return total / len(inputs)
    if model == "triply-quantized":
        if ell is None or cost is None:
            raise ConfigError("the triply quantized model needs ell and the cost matrix")
        final = quantized_rollout(quantize_samples(inputs, grid, ell), seq, grid, config)
        return quantized_ensemble_cost(final, quantize_samples(labels, grid, ell), cost)
    raise ConfigError(f"unknown model {model!r}; choose one of {MODELS}")


def exhaustive_search(
    initial: Sequence[QuantizedMeasure],
    nets: Union[ActionNet, Sequence[ActionNet]],
    targets: Sequence[QuantizedMeasure],
    grid: StateGrid,
    config: SystemConfig,
    cost: np.ndarray,
    T: Optional[int] = None,
) -> Tuple[float, List[Tuple[int, ...]]]:
    """Minimum over every action path by direct rollout, plus all minimisers.

    Exponential in T; meant for checking the dynamic program on small nets.
    """
    T = config.T if T is None else T
    nets = _stage_nets(nets, T)
    best, argmins = np.inf, []
    for path in itertools.product(*(range(len(net)) for net in nets)):
        seq = [nets[t][a] for t, a in enumerate(path)]
        final = quantized_rollout(initial, seq, grid, config)
        v = quantized_ensemble_cost(final, targets, cost)
        if v < best:
            best, argmins = v, [path]
        elif v == best:
            argmins.append(path)
    return best, argmins


# ---------------------------------------------------------------------------
# persistence

def action_to_json(U: WeightAction) -> dict:
    return {name: arr.tolist() for name, arr in zip("WAbQKV", U.arrays())}


def action_from_json(data: dict) -> WeightAction:
    return WeightAction(*(np.array(data[name], dtype=float) for name in "WAbQKV"))


def key_to_json(key: EnsembleKey) -> List[List[List[int]]]:
    return [[[a, c] for a, c in zip(m.indices, m.counts)] for m in key]


def key_from_json(data, level: int) -> EnsembleKey:
    return tuple(QuantizedMeasure.from_pairs(((a, c) for a, c in m), level) for m in data)


def policy_document(policy: OpenLoopPolicy, run_config: dict, extra: Optional[dict] = None) -> dict:
    doc = {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "config": run_config,
        "nets": policy.nets,
        "action_indices": list(policy.action_indices),
        "actions": [action_to_json(U) for U in policy.actions],
        "initial_counts": key_to_json(policy.initial),
        "value": policy.value,
    }
    if extra:
        doc.update(extra)
    return doc


def dumps_policy(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def loads_policy(text: str) -> dict:
    doc = json.loads(text)
    if doc.get("format") != POLICY_FORMAT:
        raise ConfigError("not a policy document")
    if doc.get("version") != POLICY_VERSION:
        raise ConfigError(f"unsupported policy version {doc.get('version')}")
    return doc


def policy_actions(doc: dict) -> List[WeightAction]:
    return [action_from_json(a) for a in doc["actions"]]
