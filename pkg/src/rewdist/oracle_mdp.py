"""Small tabular MDPs with exact (enumerated) transforms and distances.

Everything here is computed by weighted sums over the full table, with no
sampling. The sampled estimators in :mod:`rewdist.metrics` are checked
against these values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DEFAULT_GAMMA, DegenerateVariance, DynamicsModel, RewardFunction, as_generator
from .metrics import ActionGrid

MAX_STATES = 12
MAX_ACTIONS = 5


@dataclass
class TabularMdp:
    transition_table: np.ndarray  # [s, a, s']
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        P = np.asarray(self.transition_table, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("transition_table must have shape [S, A, S]")
        if P.shape[0] > MAX_STATES or P.shape[1] > MAX_ACTIONS:
            raise ValueError(f"oracle MDPs are limited to {MAX_STATES} states and {MAX_ACTIONS} actions")
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, atol=1e-12, rtol=0):
            raise ValueError("each transition row must be a probability distribution")
        self.transition_table = P

    @property
    def n_states(self):
        return self.transition_table.shape[0]

    @property
    def n_actions(self):
        return self.transition_table.shape[1]

    @classmethod
    def random(cls, n_states, n_actions, rng, gamma=DEFAULT_GAMMA, concentration=1.0) -> "TabularMdp":
        rng = as_generator(rng)
        P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
        return cls(P, gamma)

    def uniform_actions(self) -> np.ndarray:
        return np.full(self.n_actions, 1.0 / self.n_actions)

    def stationary_distribution(self, policy=None, tol=1e-12, max_iter=100_000) -> np.ndarray:
        """Stationary state distribution under ``policy`` (uniform by default), by power iteration."""
        policy = self.uniform_actions() if policy is None else np.asarray(policy)
        chain = np.einsum("a,sat->st", policy, self.transition_table)
        # Lazy chain has the same stationary distribution and avoids periodic oscillation.
        chain = 0.5 * (chain + np.eye(self.n_states))
        d = np.full(self.n_states, 1.0 / self.n_states)
        for _ in range(max_iter):
            nxt = d @ chain
            if np.max(np.abs(nxt - d)) < tol:
                return nxt / nxt.sum()
            d = nxt
        raise RuntimeError("power iteration did not converge")

    def coverage(self, policy=None) -> np.ndarray:
        """Joint (s, a, s') distribution of one step from the stationary distribution."""
        policy = self.uniform_actions() if policy is None else np.asarray(policy)
        d = self.stationary_distribution(policy)
        return d[:, None, None] * policy[None, :, None] * self.transition_table

    def sample_transitions(self, n, rng, policy=None):
        """``n`` i.i.d. draws from :meth:`coverage`, as 1-length state/action columns."""
        rng = as_generator(rng)
        cov = self.coverage(policy).reshape(-1)
        flat = rng.choice(cov.size, size=n, p=cov / cov.sum())
        s, a, s2 = np.unravel_index(flat, self.transition_table.shape)
        col = lambda x: x.astype(np.float64)[:, None]
        return col(s), col(a), col(s2)

    def action_grid(self) -> ActionGrid:
        return ActionGrid.linspace([(0, self.n_actions - 1)], self.n_actions)


@dataclass
class TabularReward:
    values: np.ndarray  # [s, a, s']

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or not np.all(np.isfinite(self.values)):
            raise ValueError("reward table must be a finite [S, A, S] array")

    @classmethod
    def random(cls, n_states, n_actions, rng) -> "TabularReward":
        return cls(as_generator(rng).standard_normal((n_states, n_actions, n_states)))

    def shaped(self, potential, gamma) -> "TabularReward":
        potential = np.asarray(potential, dtype=np.float64)
        return TabularReward(self.values + gamma * potential[None, None, :] - potential[:, None, None])

    def __add__(self, other):
        other = other.values if isinstance(other, TabularReward) else other
        return TabularReward(self.values + other)

    def __mul__(self, k):
        return TabularReward(self.values * k)

    __rmul__ = __mul__


def _table(r):
    return r.values if isinstance(r, TabularReward) else np.asarray(r, dtype=np.float64)


def exact_epic_canonicalize(r, d_s, d_a, gamma=DEFAULT_GAMMA) -> TabularReward:
    R = _table(r)
    d_s = np.asarray(d_s, dtype=np.float64)
    d_a = np.asarray(d_a, dtype=np.float64)
    # E[R(x, A, S')] for every fixed first argument x.
    from_state = np.einsum("xay,a,y->x", R, d_a, d_s)
    mean_all = d_s @ from_state
    canon = R + gamma * from_state[None, None, :] - from_state[:, None, None] - gamma * mean_all
    return TabularReward(canon)


def exact_dard_transform(r, mdp: TabularMdp, d_a=None) -> TabularReward:
    R = _table(r)
    P = mdp.transition_table
    gamma = mdp.gamma
    d_a = mdp.uniform_actions() if d_a is None else np.asarray(d_a, dtype=np.float64)
    # E[R(x, A, X')] with X' ~ T(.|x, A), for every x.
    from_state = np.einsum("a,xay,xay->x", d_a, P, R)
    # Distribution of X' ~ T(.|s, A): Q[s, x'].
    Q = np.einsum("a,sax->sx", d_a, P)
    # E over X' ~ T(.|s, A1), then (A2, X'') with X'' ~ T(.|s', A2) of R(X', A2, X'').
    M = d_a[None, :, None] * P                       # [s', a2, x'']
    cross = np.einsum("sx,tay,xay->st", Q, M, R)     # [s, s']
    canon = R + gamma * from_state[None, None, :] - from_state[:, None, None] - gamma * cross[:, None, :]
    return TabularReward(canon)


def weighted_pearson_distance(x, y, w) -> float:
    """Population Pearson distance of two tables under weights ``w``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-9):
        raise ValueError("coverage weights must form a distribution")
    sw = np.sqrt(w)

    def unit(v):
        c = sw * (v - w @ v)
        norm = np.linalg.norm(c)
        scale = max(1.0, float(np.max(np.abs(v))))
        if norm <= 1e-12 * scale:
            raise DegenerateVariance("reward has zero variance under the coverage distribution")
        return c / norm

    return float(0.5 * np.linalg.norm(unit(x) - unit(y)))


def exact_distance(ra, rb, which: str, mdp: TabularMdp, coverage=None, d_s=None, d_a=None) -> float:
    """Exact EPIC / DARD / Pearson distance under an explicit (s, a, s') coverage.

    ``coverage`` defaults to one step of the uniform-action policy from
    its stationary distribution. EPIC's state and action distributions
    default to the coverage marginals; DARD's action distribution to
    uniform (the full action grid).
    """
    cov = mdp.coverage() if coverage is None else np.asarray(coverage, dtype=np.float64)
    if which == "epic":
        d_s = cov.sum(axis=(1, 2)) if d_s is None else d_s
        d_a = cov.sum(axis=(0, 2)) if d_a is None else d_a
        ta = exact_epic_canonicalize(ra, d_s, d_a, mdp.gamma).values
        tb = exact_epic_canonicalize(rb, d_s, d_a, mdp.gamma).values
    elif which == "dard":
        ta = exact_dard_transform(ra, mdp, d_a).values
        tb = exact_dard_transform(rb, mdp, d_a).values
    elif which == "pearson":
        ta, tb = _table(ra), _table(rb)
    else:
        raise ValueError(f"unknown metric {which!r}")
    return weighted_pearson_distance(ta, tb, cov)


class TabularRewardFunction(RewardFunction):
    """A reward table exposed through the batched reward interface.

    States and actions are 1-length vectors holding the integer index.
    """

    def __init__(self, table, name="tabular"):
        self.table = _table(table)
        self.name = name

    def evaluate(self, s, a, s_next):
        i = s[:, 0].astype(np.intp)
        j = a[:, 0].astype(np.intp)
        k = s_next[:, 0].astype(np.intp)
        return self.table[i, j, k]


class TabularDynamics(DynamicsModel):
    def __init__(self, mdp: TabularMdp):
        self.mdp = mdp
        self._cdf = np.cumsum(mdp.transition_table, axis=2)
        self._cdf[..., -1] = 1.0
        self.is_deterministic = bool(np.all(np.isclose(mdp.transition_table.max(axis=2), 1.0)))

    def sample(self, s, a, rng):
        i = s[:, 0].astype(np.intp)
        j = a[:, 0].astype(np.intp)
        cdf = self._cdf[i, j]
        if self.is_deterministic:
            nxt = np.argmax(self.mdp.transition_table[i, j], axis=1)
        else:
            u = as_generator(rng).random(len(i))
            nxt = (cdf < u[:, None]).sum(axis=1)
        return nxt.astype(np.float64)[:, None]


def chain_mdp(n_states=3, gamma=DEFAULT_GAMMA) -> TabularMdp:
    """Deterministic cycle ``s -> s + 1 mod n`` with a single action."""
    P = np.zeros((n_states, 1, n_states))
    P[np.arange(n_states), 0, (np.arange(n_states) + 1) % n_states] = 1.0
    return TabularMdp(P, gamma)
