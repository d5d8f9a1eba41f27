"""Controlled interacting-particle dynamics of a single-head transformer block.

A sequence of ``N`` feature vectors is a cloud of particles.  Each layer applies
a shared weight tuple ``U = (W, A, b, Q, K, V)``::

    x_i <- W act(A x_i + b) + sum_j softmax_j(beta <Q x_i, K x_j>) V x_j

and every particle carries the positional encoding ``i / N`` so that the order
survives when the cloud is viewed as an empirical measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError

Array = np.ndarray


def _relu(z: Array) -> Array:
    return np.maximum(z, 0.0)


def _hardtanh(z: Array) -> Array:
    return np.clip(z, -1.0, 1.0)


# Every entry must be 1-Lipschitz.
ACTIVATIONS: Dict[str, Callable[[Array], Array]] = {
    "relu": _relu,
    "tanh": np.tanh,
    "hardtanh": _hardtanh,
    "identity": lambda z: z,
}


def get_activation(name: str) -> Callable[[Array], Array]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(
            f"unknown activation {name!r}; choose one of {sorted(ACTIVATIONS)}"
        ) from None


@dataclass(frozen=True)
class SystemConfig:
    """Sizes and constants of the controlled particle system.

    ``state_box`` holds one ``(lo, hi)`` pair per feature coordinate and
    ``action_bound`` is the bound on the absolute value of every weight entry.
    ``lam`` weighs positional mismatch in the transport cost; when omitted it
    defaults to ``N * diam(S)**2``, twice the smallest admissible value.
    """

    N: int = 4
    d: int = 2
    d1: int = 2
    d2: int = 2
    beta: float = 0.5
    T: int = 2
    activation: str = "relu"
    state_box: Tuple[Tuple[float, float], ...] = ((-1.0, 1.0), (-1.0, 1.0))
    action_bound: float = 1.0
    lam: Optional[float] = None

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.state_box)
        object.__setattr__(self, "state_box", box)
        for name in ("N", "d", "d1", "d2"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if len(box) != self.d:
            raise ConfigError(f"state_box has {len(box)} axes but d={self.d}")
        if any(not lo < hi for lo, hi in box):
            raise ConfigError("state_box needs lo < hi on every axis")
        if not self.action_bound > 0:
            raise ConfigError("action_bound must be positive")
        get_activation(self.activation)
        if self.lam is None:
            object.__setattr__(self, "lam", self.N * self.diam_sq)
        if not self.lam > self.lambda_threshold:
            raise ConfigError(
                f"lam={self.lam} must exceed (N/2) diam(S)^2 = {self.lambda_threshold}"
            )

    @property
    def diam_sq(self) -> float:
        return float(sum((hi - lo) ** 2 for lo, hi in self.state_box))

    @property
    def lambda_threshold(self) -> float:
        return self.N / 2 * self.diam_sq

    @property
    def n_weights(self) -> int:
        return sum(math.prod(s) for s in weight_shapes(self).values())

    def act(self) -> Callable[[Array], Array]:
        return get_activation(self.activation)

    def encodings(self) -> List[Fraction]:
        return [Fraction(i, self.N) for i in range(1, self.N + 1)]

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "d": self.d,
            "d1": self.d1,
            "d2": self.d2,
            "beta": self.beta,
            "T": self.T,
            "activation": self.activation,
            "state_box": [list(b) for b in self.state_box],
            "action_bound": self.action_bound,
            "lam": self.lam,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SystemConfig":
        data = dict(data)
        if "state_box" in data:
            data["state_box"] = tuple(tuple(b) for b in data["state_box"])
        return cls(**data)


WEIGHT_NAMES = ("W", "A", "b", "Q", "K", "V")


def weight_shapes(config: SystemConfig) -> Dict[str, Tuple[int, ...]]:
    d, d1, d2 = config.d, config.d1, config.d2
    return {
        "W": (d, d1),
        "A": (d1, d),
        "b": (d1,),
        "Q": (d2, d),
        "K": (d2, d),
        "V": (d, d),
    }


@dataclass(frozen=True, eq=False)
class WeightAction:
    """One layer's weights, shared by every particle and every sample."""

    W: Array
    A: Array
    b: Array
    Q: Array
    K: Array
    V: Array

    def __post_init__(self):
        for name in WEIGHT_NAMES:
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def arrays(self) -> Tuple[Array, ...]:
        return tuple(getattr(self, name) for name in WEIGHT_NAMES)

    def flat(self) -> Array:
        """All entries in W, A, b, Q, K, V order, each row-major."""
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, config: SystemConfig, vec: Sequence[float]) -> "WeightAction":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (config.n_weights,):
            raise ConfigError(
                f"expected {config.n_weights} weight entries, got {vec.shape}"
            )
        parts = {}
        pos = 0
        for name, shape in weight_shapes(config).items():
            size = math.prod(shape)
            parts[name] = vec[pos : pos + size].reshape(shape)
            pos += size
        return cls(**parts)

    @classmethod
    def zeros(cls, config: SystemConfig) -> "WeightAction":
        return cls.from_flat(config, np.zeros(config.n_weights))

    @classmethod
    def random(cls, config: SystemConfig, rng: np.random.Generator) -> "WeightAction":
        bound = config.action_bound
        return cls.from_flat(config, rng.uniform(-bound, bound, config.n_weights))

    def check(self, config: SystemConfig) -> None:
        for name, shape in weight_shapes(config).items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
        if np.any(np.abs(self.flat()) > config.action_bound):
            raise ConfigError("weight entry outside the action box")

    def __eq__(self, other):
        if not isinstance(other, WeightAction):
            return NotImplemented
        return all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.arrays(), other.arrays())
        )

    def __hash__(self):
        return hash(tuple(self.flat().tolist()))

    def distance(self, other: "WeightAction") -> float:
        """Product Frobenius distance."""
        return float(np.linalg.norm(self.flat() - other.flat()))


@dataclass(frozen=True, order=True)
class ParticleState:
    """A superstate: positional encoding paired with a feature vector."""

    pe: Fraction
    feature: Tuple[float, ...] = field(compare=True)

    def __post_init__(self):
        object.__setattr__(self, "pe", Fraction(self.pe))
        object.__setattr__(self, "feature", tuple(float(v) for v in self.feature))

    def check(self, config: SystemConfig) -> None:
        if not (0 < self.pe <= 1 and (self.pe * config.N).denominator == 1):
            raise ConfigError(f"encoding {self.pe} is not of the form i/{config.N}")
        if len(self.feature) != config.d:
            raise ConfigError("feature dimension mismatch")
        for v, (lo, hi) in zip(self.feature, config.state_box):
            if not lo <= v <= hi:
                raise ConfigError(f"feature {self.feature} outside the state box")


@dataclass(frozen=True)
class SequenceSample:
    """One data point: N input vectors and N label vectors."""

    inputs: Tuple[Tuple[float, ...], ...]
    labels: Tuple[Tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "inputs", _as_vectors(self.inputs))
        object.__setattr__(self, "labels", _as_vectors(self.labels))
        if len(self.inputs) != len(self.labels):
            raise ConfigError("inputs and labels differ in length")

    def check(self, config: SystemConfig) -> None:
        for seq in (self.inputs, self.labels):
            if len(seq) != config.N:
                raise ConfigError(f"sample has {len(seq)} vectors, expected N={config.N}")
            for vec in seq:
                ParticleState(Fraction(1, config.N), vec).check(config)


def _as_vectors(vectors) -> Tuple[Tuple[float, ...], ...]:
    return tuple(tuple(float(v) for v in vec) for vec in vectors)


# ---------------------------------------------------------------------------
# numerical kernel

def flow_kernel(
    queries: Array,
    keys: Array,
    masses: Array,
    U: WeightAction,
    beta: float,
    act: Callable[[Array], Array],
) -> Array:
    """Apply one layer to a batch of query points.

    ``queries`` has shape ``(B, q, d)``, ``keys`` ``(B, n, d)`` and ``masses``
    ``(B, n)``.  Every query attends to the atoms of its own batch entry, with
    the softmax weights multiplied by the atom masses.  Zero-mass atoms are
    ignored.  Returns the updated query features, shape ``(B, q, d)``.

    All dynamics in the package go through this function so that the
    particle and measure views produce bitwise identical features.
    """
    hidden = act(np.einsum("bqd,hd->bqh", queries, U.A) + U.b)
    ff = np.einsum("bqh,dh->bqd", hidden, U.W)
    return ff + _attend(queries, keys, masses, U, beta)


def attention_matrix(
    queries: Array, keys: Array, masses: Array, U: WeightAction, beta: float
) -> Array:
    """Mass-weighted softmax of ``beta <Q x, K z>``, shape ``(B, q, n)``."""
    qv = np.einsum("bqd,ed->bqe", queries, U.Q)
    kv = np.einsum("bnd,ed->bne", keys, U.K)
    logits = beta * np.einsum("bqe,bne->bqn", qv, kv)
    live = (masses > 0)[:, None, :]
    logits = np.where(live, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = masses[:, None, :] * np.exp(logits)
    return weights / weights.sum(axis=-1, keepdims=True)


def _attend(queries, keys, masses, U, beta):
    weights = attention_matrix(queries, keys, masses, U, beta)
    values = np.einsum("bnd,ed->bne", keys, U.V)
    return np.einsum("bqn,bne->bqe", weights, values)


# ---------------------------------------------------------------------------
# public operations

def attention_weights(
    x: Sequence[float],
    atoms: Sequence[Tuple[float, Sequence[float]]],
    U: WeightAction,
    beta: float,
) -> Array:
    """Attention of the point ``x`` over weighted atoms ``(mass, feature)``."""
    if not atoms:
        raise ConfigError("attention needs at least one atom")
    masses = np.array([[float(m) for m, _ in atoms]])
    keys = np.array([[list(z) for _, z in atoms]], dtype=float)
    query = np.asarray(x, dtype=float)[None, None, :]
    return attention_matrix(query, keys, masses, U, beta)[0, 0]


def step_particle(X: ParticleState, U: WeightAction, mu, config: SystemConfig) -> ParticleState:
    """Move one superstate through a layer, attending to the measure ``mu``.

    ``mu`` is any object exposing ``feature_array()`` and ``mass_array()``
    (a :class:`~ocformer.transport.DiscreteMeasure`).
    """
    keys = mu.feature_array()[None]
    masses = mu.mass_array()[None]
    query = np.asarray(X.feature, dtype=float)[None, None, :]
    out = flow_kernel(query, keys, masses, U, config.beta, config.act())
    return ParticleState(X.pe, out[0, 0])


def particle_trajectory(
    inputs: Sequence[Sequence[float]],
    actions: Iterable[WeightAction],
    config: SystemConfig,
) -> List[Array]:
    """Feature arrays ``(N, d)`` at every layer, the input included."""
    x = np.asarray(inputs, dtype=float)
    if x.shape != (config.N, config.d):
        raise ConfigError(f"inputs have shape {x.shape}, expected {(config.N, config.d)}")
    masses = np.full((1, config.N), 1.0 / config.N)
    act = config.act()
    path = [x]
    for U in actions:
        x = flow_kernel(x[None], x[None], masses, U, config.beta, act)[0]
        path.append(x)
    return path


def forward_sequence(
    inputs: Sequence[Sequence[float]],
    actions: Iterable[WeightAction],
    config: SystemConfig,
) -> List[ParticleState]:
    """Terminal superstates ``(i/N, x_T^i)`` of the particle system."""
    final = particle_trajectory(inputs, actions, config)[-1]
    return [ParticleState(pe, row) for pe, row in zip(config.encodings(), final)]


def particle_loss(
    outputs: Sequence[Array], labels: Sequence[Sequence[Sequence[float]]]
) -> float:
    """Mean squared error ``1/(NK) sum_k sum_i |x_T^{i,k} - y^{i,k}|^2``."""
    out = np.asarray(outputs, dtype=float)
    lab = np.asarray(labels, dtype=float)
    if out.shape != lab.shape:
        raise ConfigError(f"output shape {out.shape} does not match labels {lab.shape}")
    return float(np.mean(np.sum((out - lab) ** 2, axis=-1)))
