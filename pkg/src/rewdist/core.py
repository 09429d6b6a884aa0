"""Shared domain types, interfaces and seeded randomness.

States and actions are flat float vectors. Batches are passed around as
2-D numpy arrays (one row per transition) rather than lists of objects so
every reward and dynamics evaluation is vectorized.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_GAMMA = 0.95


class RewardDistanceError(Exception):
    """Base class for errors raised by this package."""


class DegenerateVariance(RewardDistanceError):
    """A reward (or transformed reward) is constant on the evaluated batch."""


class DynamicsFailure(RewardDistanceError):
    """A dynamics model produced an invalid next state."""


class OutOfBoundsAction(RewardDistanceError):
    pass


class SchemaMismatch(RewardDistanceError):
    pass


class DivergenceDetected(RewardDistanceError):
    """Training loss became non-finite."""


class SingularSystem(RewardDistanceError):
    pass


class SchemaVersionMismatch(RewardDistanceError):
    pass


class ChecksumMismatch(RewardDistanceError):
    pass


class InsufficientEpisodes(RewardDistanceError):
    pass


@dataclass(frozen=True)
class StateVec:
    values: np.ndarray
    schema_id: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise ValueError("state contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class ActionVec:
    values: np.ndarray
    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(self.bounds) != values.shape[0]:
            raise ValueError("action length does not match bounds")
        for v, (lo, hi) in zip(values, self.bounds):
            if not lo <= v <= hi:
                raise OutOfBoundsAction(f"action component {v} outside [{lo}, {hi}]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class Transition:
    s: StateVec
    a: ActionVec
    s_next: StateVec
    episode: int = 0
    t: int = 0
    r_gt: float = 0.0
    done: bool = False

    def __post_init__(self):
        if self.s.schema_id != self.s_next.schema_id:
            raise SchemaMismatch("s and s_next have different schemas")
        if self.t < 0:
            raise ValueError("timestep must be non-negative")


class RewardFunction:
    """Maps batches of transitions ``(s, a, s')`` to scalar rewards.

    Subclasses implement :meth:`evaluate` on 2-D arrays with one row per
    transition. Implementations must be pure: the same rows always give
    the same rewards.
    """

    name = "reward"

    def evaluate(self, s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, s, a, s_next):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        s_next = np.asarray(s_next, dtype=np.float64)
        if s.ndim == 1:
            return self.evaluate(s[None], a[None], s_next[None])[0]
        return self.evaluate(s, a, s_next)

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r})"


class PotentialFunction:
    name = "potential"

    def evaluate(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, states):
        states = np.asarray(states, dtype=np.float64)
        if states.ndim == 1:
            return self.evaluate(states[None])[0]
        return self.evaluate(states)


class ZeroPotential(PotentialFunction):
    name = "zero"

    def evaluate(self, states):
        return np.zeros(states.shape[0])


class DynamicsModel:
    """Conditional next-state sampler ``T(s' | s, a)`` over row batches."""

    is_deterministic = False

    def sample(self, s: np.ndarray, a: np.ndarray, rng) -> np.ndarray:
        raise NotImplementedError


class FunctionReward(RewardFunction):
    """Wraps a plain ``f(s, a, s_next) -> rewards`` callable."""

    def __init__(self, fn, name="fn"):
        self.fn = fn
        self.name = name

    def evaluate(self, s, a, s_next):
        return np.asarray(self.fn(s, a, s_next), dtype=np.float64)


class Rng:
    """Seeded generator with labeled, order-independent child streams.

    A child stream depends only on the root seed and the label path, so
    creating or consuming one stream never perturbs another. Attribute
    access falls through to the wrapped ``numpy.random.Generator``.
    """

    def __init__(self, seed: int, path: Sequence[str] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for label in self.path:
            digest = hashlib.sha256(label.encode()).digest()
            words.extend(np.frombuffer(digest[:16], dtype=np.uint32).tolist())
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (str(label),))

    def __getattr__(self, item):
        return getattr(self.generator, item)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '.'})"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, Rng):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def discounted_return(rewards, gamma: float = DEFAULT_GAMMA) -> float:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        return 0.0
    discounts = gamma ** np.arange(rewards.size)
    # 0**0 is 1, so gamma = 0 keeps only the first reward.
    return float(np.sum(discounts * rewards))


@dataclass
class TransitionBatch:
    """Column view of a set of transitions."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.s.shape[0]

    def take(self, idx) -> "TransitionBatch":
        return TransitionBatch(self.s[idx], self.a[idx], self.s_next[idx], dict(self.meta))
