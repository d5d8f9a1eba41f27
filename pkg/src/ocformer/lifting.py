"""Measure-valued view of the particle system.

Each sample's particle cloud is an empirical measure on superstates, and a
layer acts on it by push-forward.  A batch of K samples driven by one shared
weight tuple is an ensemble; training minimises the mean squared W_{2,lam}
distance between the terminal ensemble and the label measures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

from .core import ParticleState, SystemConfig, WeightAction, flow_kernel
from .errors import ConfigError
from .transport import DiscreteMeasure, wasserstein2_sq


@dataclass(frozen=True)
class EnsembleState:
    measures: Tuple[DiscreteMeasure, ...]

    def __post_init__(self):
        object.__setattr__(self, "measures", tuple(self.measures))

    def __len__(self):
        return len(self.measures)

    def __iter__(self):
        return iter(self.measures)

    @classmethod
    def from_features(cls, samples: Iterable[Sequence[Sequence[float]]]) -> "EnsembleState":
        return cls(tuple(DiscreteMeasure.empirical(x) for x in samples))


@dataclass(frozen=True)
class ActionSequence:
    actions: Tuple[WeightAction, ...]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def __add__(self, other: "ActionSequence") -> "ActionSequence":
        return ActionSequence(self.actions + other.actions)

    def check(self, config: SystemConfig) -> None:
        if len(self.actions) != config.T:
            raise ConfigError(f"{len(self.actions)} actions for horizon T={config.T}")
        for U in self.actions:
            U.check(config)


def push_forward(mu: DiscreteMeasure, U: WeightAction, config: SystemConfig) -> DiscreteMeasure:
    """Image of ``mu`` under one layer; masses move with their atoms."""
    feats = mu.feature_array()
    out = flow_kernel(
        feats[None], feats[None], mu.mass_array()[None], U, config.beta, config.act()
    )[0]
    atoms = [ParticleState(a.pe, row) for a, row in zip(mu.atoms, out)]
    return DiscreteMeasure.from_atoms(atoms, mu.masses)


def ensemble_step(E: EnsembleState, U: WeightAction, config: SystemConfig) -> EnsembleState:
    return EnsembleState(tuple(push_forward(mu, U, config) for mu in E))


def rollout(E0: EnsembleState, seq: Iterable[WeightAction], config: SystemConfig) -> EnsembleState:
    E = E0
    for U in seq:
        E = ensemble_step(E, U, config)
    return E


def rollout_path(E0: EnsembleState, seq: Iterable[WeightAction], config: SystemConfig):
    """Every intermediate ensemble, ``E0`` first."""
    path = [E0]
    for U in seq:
        path.append(ensemble_step(path[-1], U, config))
    return path


def terminal_cost(E_T: EnsembleState, targets: EnsembleState, lam: float) -> float:
    """Mean over samples of the squared W_{2,lam} distance to the targets."""
    if len(E_T) != len(targets):
        raise ConfigError(f"{len(E_T)} terminal measures but {len(targets)} targets")
    total = 0.0
    for mu, nu in zip(E_T, targets):
        total += wasserstein2_sq(mu, nu, lam)[0]
    return total / len(E_T)
