"""Reward canonicalization, dynamics-aware transformation and distances.

Every estimator here evaluates all rewards being compared on one shared
set of random draws. That makes ``d(R, R) == 0`` exact and removes the
sampling noise that would otherwise appear in the difference of two
independently estimated transforms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    DEFAULT_GAMMA,
    DegenerateVariance,
    DynamicsFailure,
    RewardFunction,
    as_generator,
)

# Maximum number of (s, a, s') rows handed to a reward in one call.
CHUNK_ROWS = 1 << 17


@dataclass(frozen=True)
class ActionGrid:
    actions: np.ndarray
    per_dim_count: int

    @classmethod
    def linspace(cls, bounds, per_dim_count: int) -> "ActionGrid":
        """Cross product of ``per_dim_count`` evenly spaced values per dimension."""
        if per_dim_count < 1:
            raise ValueError("per_dim_count must be >= 1")
        axes = [np.linspace(lo, hi, per_dim_count) if per_dim_count > 1 else np.array([(lo + hi) / 2])
                for lo, hi in bounds]
        actions = np.array(list(itertools.product(*axes)), dtype=np.float64)
        return cls(actions=actions, per_dim_count=per_dim_count)

    def __len__(self):
        return self.actions.shape[0]


@dataclass
class MetricConfig:
    n_v: int = 10_000
    n_m: int = 1024
    grid_per_dim: int = 4
    n_t: int = 1
    gamma: float = DEFAULT_GAMMA
    seed: int = 0
    # "cross" averages the last DARD term over every (x', x'') pair;
    # "independent" pairs them one-to-one through a random permutation.
    pairing: str = "cross"

    def __post_init__(self):
        for name in ("n_v", "n_m", "grid_per_dim", "n_t"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.pairing not in ("cross", "independent"):
            raise ValueError(f"unknown pairing {self.pairing!r}")


@dataclass
class CoverageBatch:
    """Jointly sampled transitions plus the state/action marginals."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    state_pool: np.ndarray
    action_pool: np.ndarray

    def __post_init__(self):
        self.s = np.atleast_2d(np.asarray(self.s, dtype=np.float64))
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        self.s_next = np.atleast_2d(np.asarray(self.s_next, dtype=np.float64))
        self.state_pool = np.atleast_2d(np.asarray(self.state_pool, dtype=np.float64))
        self.action_pool = np.atleast_2d(np.asarray(self.action_pool, dtype=np.float64))
        if len(self.s) == 0 or len(self.state_pool) == 0 or len(self.action_pool) == 0:
            raise ValueError("coverage batch, state pool and action pool must be non-empty")
        if not (len(self.s) == len(self.a) == len(self.s_next)):
            raise ValueError("s, a and s_next must have equal length")

    def __len__(self):
        return self.s.shape[0]

    def take(self, idx) -> "CoverageBatch":
        return CoverageBatch(self.s[idx], self.a[idx], self.s_next[idx], self.state_pool, self.action_pool)

    @classmethod
    def sample(cls, s, a, s_next, n_v, rng, state_pool=None, action_pool=None) -> "CoverageBatch":
        """Draw ``n_v`` transitions (without replacement when possible).

        The pools default to the full state and action columns given.
        """
        rng = as_generator(rng)
        n = len(s)
        idx = rng.choice(n, size=n_v, replace=n_v > n)
        idx.sort()
        return cls(
            s[idx], a[idx], s_next[idx],
            s if state_pool is None else state_pool,
            a if action_pool is None else action_pool,
        )


@dataclass
class DistanceReport:
    pair: tuple[str, str]
    d_epic: float
    d_dard: float
    d_pearson: float
    d_dard_learned: float | None = None
    per_seed_values: dict = field(default_factory=dict)
    std_err: dict = field(default_factory=dict)


def _as_list(rewards):
    if isinstance(rewards, RewardFunction):
        return [rewards]
    return list(rewards)


def _evaluate(reward: RewardFunction, s, a, s_next) -> np.ndarray:
    out = np.asarray(reward.evaluate(s, a, s_next), dtype=np.float64).reshape(-1)
    if out.shape[0] != s.shape[0]:
        raise ValueError(f"reward {reward.name!r} returned {out.shape[0]} values for {s.shape[0]} rows")
    return out


def _chunks(n: int, per_item: int):
    step = max(1, CHUNK_ROWS // max(1, per_item))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _centered_unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean()
    scale = max(1.0, float(np.max(np.abs(x))))
    norm = np.linalg.norm(centered)
    if not np.isfinite(norm) or norm <= 1e-12 * scale * np.sqrt(x.size):
        raise DegenerateVariance("input has (numerically) zero variance")
    return centered / norm


def pearson_distance(x, y) -> float:
    """``sqrt(1 - rho) / sqrt(2)`` between two samples.

    Computed as half the Euclidean distance between the centered,
    unit-normalized vectors, which is algebraically identical and keeps
    symmetry and the triangle inequality exact up to rounding.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    if x.size < 2:
        raise ValueError("need at least two samples")
    return float(0.5 * np.linalg.norm(_centered_unit(x) - _centered_unit(y)))


def pearson_reward_distance(ra: RewardFunction, rb: RewardFunction, batch: CoverageBatch) -> float:
    """Pearson distance of the raw (untransformed) rewards on the batch."""
    return pearson_distance(_evaluate(ra, batch.s, batch.a, batch.s_next),
                            _evaluate(rb, batch.s, batch.a, batch.s_next))


# ---------------------------------------------------------------------------
# EPIC


@dataclass
class EpicParts:
    """Per-draw reward evaluations behind an EPIC canonicalization.

    Rows are deduplicated: ``next_rows[k, u, m]`` is R_k(x_u, U_m, X'_m) for
    the u-th distinct next state, with ``next_inv`` mapping batch rows to
    distinct states (likewise ``cur_rows``/``cur_inv`` for s).
    ``v_mean[k, m]`` is R_k(X_m, U_m, X'_m) and ``obs[k, n]`` is R_k on the batch.
    Unless ``keep_draws`` was set, the draw axis of the row arrays is
    already averaged down to length 1.
    """

    gamma: float
    obs: np.ndarray
    next_rows: np.ndarray
    next_inv: np.ndarray
    cur_rows: np.ndarray
    cur_inv: np.ndarray
    v_mean: np.ndarray

    def canonical(self) -> np.ndarray:
        const = self.v_mean.mean(axis=1)
        nxt = self.next_rows.mean(axis=2)[:, self.next_inv]
        cur = self.cur_rows.mean(axis=2)[:, self.cur_inv]
        return self.obs + self.gamma * nxt - cur - self.gamma * const[:, None]


def _unique_rows(x):
    uniq, inv = np.unique(x, axis=0, return_inverse=True)
    return uniq, inv.reshape(-1)


def _against_draws(rewards, states, U, X2, keep):
    """R_k(x, U_m, X'_m) for every row x of ``states`` and draw m (or its mean over m)."""
    n, n_m = len(states), len(U)
    out = np.empty((len(rewards), n, n_m if keep else 1))
    for sl in _chunks(n, n_m):
        c = sl.stop - sl.start
        U_rep = np.broadcast_to(U, (c, n_m, U.shape[1])).reshape(c * n_m, -1)
        X2_rep = np.broadcast_to(X2, (c, n_m, X2.shape[1])).reshape(c * n_m, -1)
        x_rep = np.repeat(states[sl], n_m, axis=0)
        for j, r in enumerate(rewards):
            vals = _evaluate(r, x_rep, U_rep, X2_rep).reshape(c, n_m)
            out[j, sl] = vals if keep else vals.mean(axis=1, keepdims=True)
    return out


def epic_parts(rewards, batch: CoverageBatch, cfg: MetricConfig, rng, keep_draws=False) -> EpicParts:
    rewards = _as_list(rewards)
    rng = as_generator(rng)
    n_m = cfg.n_m
    ix = rng.integers(len(batch.state_pool), size=n_m)
    iu = rng.integers(len(batch.action_pool), size=n_m)
    ix2 = rng.integers(len(batch.state_pool), size=n_m)
    X, U, X2 = batch.state_pool[ix], batch.action_pool[iu], batch.state_pool[ix2]

    obs = np.stack([_evaluate(r, batch.s, batch.a, batch.s_next) for r in rewards])
    v_mean = np.stack([_evaluate(r, X, U, X2) for r in rewards])
    next_u, next_inv = _unique_rows(batch.s_next)
    cur_u, cur_inv = _unique_rows(batch.s)
    return EpicParts(
        cfg.gamma, obs,
        _against_draws(rewards, next_u, U, X2, keep_draws), next_inv,
        _against_draws(rewards, cur_u, U, X2, keep_draws), cur_inv,
        v_mean,
    )


def epic_canonicalize_many(rewards, batch, cfg, rng) -> np.ndarray:
    return epic_parts(rewards, batch, cfg, rng).canonical()


def epic_canonicalize(r: RewardFunction, batch: CoverageBatch, cfg: MetricConfig, rng) -> np.ndarray:
    """Canonically shaped reward on each batch transition.

    The ``n_m`` draws (X, U, X') are shared by every transition.
    """
    return epic_canonicalize_many([r], batch, cfg, rng)[0]


def epic_distance(ra, rb, batch, cfg, rng) -> float:
    ca, cb = epic_canonicalize_many([ra, rb], batch, cfg, rng)
    return pearson_distance(ca, cb)


# ---------------------------------------------------------------------------
# DARD


@dataclass
class DardParts:
    """Action-summed reward evaluations behind a dynamics-aware transform.

    With ``m = n_a`` grid actions and ``t = n_t`` next-state draws:
    ``t1[k, n, l]`` sums R_k(s', u_i, x''_il) over i, ``t2[k, n, j]`` sums
    R_k(s, u_i, x'_ij) over i and, for the cross pairing, ``t3[k, n, j, l]``
    sums R_k(x'_ij, u_h, x''_hl) over (i, h). Keeping the draw axes lets a
    bootstrap resample next-state draws per transition.
    """

    gamma: float
    n_a: int
    obs: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray

    def canonical(self) -> np.ndarray:
        n_a, n_t = self.n_a, self.t1.shape[-1]
        m1 = self.t1.sum(axis=-1) / (n_a * n_t)
        m2 = self.t2.sum(axis=-1) / (n_a * n_t)
        if self.t3.ndim == 4:
            m3 = self.t3.sum(axis=(-2, -1)) / (n_a * n_t) ** 2
        else:
            m3 = self.t3.sum(axis=-1) / (n_a * n_t)
        return self.obs + self.gamma * m1 - m2 - self.gamma * m3


def _checked_sample(dyn, s, a, rng) -> np.ndarray:
    out = np.asarray(dyn.sample(s, a, rng), dtype=np.float64)
    if out.shape != s.shape:
        raise DynamicsFailure(f"dynamics returned shape {out.shape}, expected {s.shape}")
    if not np.all(np.isfinite(out)):
        raise DynamicsFailure("dynamics returned non-finite states")
    return out


def dard_parts(rewards, dyn, batch: CoverageBatch, grid: ActionGrid, cfg: MetricConfig, rng) -> DardParts:
    rewards = _as_list(rewards)
    rng = as_generator(rng)
    k, n = len(rewards), len(batch)
    U = grid.actions
    n_a = U.shape[0]
    n_t = 1 if dyn.is_deterministic else cfg.n_t
    m = n_a * n_t
    ds = batch.s.shape[1]
    cross = cfg.pairing == "cross"
    perm = None if cross else rng.permutation(m)

    obs = np.stack([_evaluate(r, batch.s, batch.a, batch.s_next) for r in rewards])
    t1 = np.empty((k, n, n_t))
    t2 = np.empty((k, n, n_t))
    t3 = np.empty((k, n, n_t, n_t)) if cross else np.empty((k, n, n_t))

    # u index varies slowest, draw index fastest: flat index = i * n_t + j.
    u_flat = np.repeat(U, n_t, axis=0)
    for sl in _chunks(n, m * m if cross else m):
        c = sl.stop - sl.start
        u_rep = np.broadcast_to(u_flat, (c, m, U.shape[1])).reshape(c * m, -1)
        s_rep = np.repeat(batch.s[sl], m, axis=0)
        sn_rep = np.repeat(batch.s_next[sl], m, axis=0)
        x1 = _checked_sample(dyn, s_rep, u_rep, rng)    # x'  ~ T(. | s, u)
        x2 = _checked_sample(dyn, sn_rep, u_rep, rng)   # x'' ~ T(. | s', u)
        x1_c = x1.reshape(c, m, ds)
        x2_c = x2.reshape(c, m, ds)
        if cross:
            p_s = np.broadcast_to(x1_c[:, :, None, :], (c, m, m, ds)).reshape(-1, ds)
            p_a = np.broadcast_to(u_flat[None, None], (c, m, m, U.shape[1])).reshape(-1, U.shape[1])
            p_sn = np.broadcast_to(x2_c[:, None, :, :], (c, m, m, ds)).reshape(-1, ds)
        else:
            p_s = x1_c[:, perm].reshape(-1, ds)
            p_a = u_rep
            p_sn = x2
        for r_i, r in enumerate(rewards):
            v1 = _evaluate(r, sn_rep, u_rep, x2).reshape(c, n_a, n_t)
            v2 = _evaluate(r, s_rep, u_rep, x1).reshape(c, n_a, n_t)
            t1[r_i, sl] = v1.sum(axis=1)
            t2[r_i, sl] = v2.sum(axis=1)
            v3 = _evaluate(r, p_s, p_a, p_sn)
            if cross:
                t3[r_i, sl] = v3.reshape(c, n_a, n_t, n_a, n_t).sum(axis=(1, 3))
            else:
                t3[r_i, sl] = v3.reshape(c, n_a, n_t).sum(axis=1)
    return DardParts(cfg.gamma, n_a, obs, t1, t2, t3)


def dard_transform_many(rewards, dyn, batch, grid, cfg, rng) -> np.ndarray:
    return dard_parts(rewards, dyn, batch, grid, cfg, rng).canonical()


def dard_transform(r: RewardFunction, dyn, batch: CoverageBatch, grid: ActionGrid, cfg: MetricConfig, rng) -> np.ndarray:
    """Dynamics-aware transform of ``r`` on each batch transition.

    Next states are drawn from ``dyn`` for every grid action, from both s
    and s'. The last expectation pairs the x' drawn from s with the x''
    drawn from s', together with the action that produced x''.
    """
    return dard_transform_many([r], dyn, batch, grid, cfg, rng)[0]


def dard_distance(ra, rb, dyn, batch, grid, cfg, rng) -> float:
    ca, cb = dard_transform_many([ra, rb], dyn, batch, grid, cfg, rng)
    return pearson_distance(ca, cb)


# ---------------------------------------------------------------------------
# Uncertainty


def _multinomial_weights(rng, n_draws, shape):
    """Bootstrap resampling counts over ``n_draws`` items for each leading index."""
    idx = rng.integers(n_draws, size=shape + (n_draws,)).reshape(-1, n_draws)
    counts = np.zeros_like(idx, dtype=np.float64)
    rows = np.repeat(np.arange(idx.shape[0]), n_draws)
    np.add.at(counts, (rows, idx.reshape(-1)), 1.0)
    return counts.reshape(shape + (n_draws,))


def bootstrap_distance_se(parts, n_boot: int, rng, pair=(0, 1)) -> float:
    """Bootstrap standard error of a sampled EPIC or DARD distance.

    Each replicate resamples the batch transitions and, independently, the
    random draws used by the transformation (the shared canonicalization
    draws for EPIC, the per-transition next-state draws for DARD).
    """
    rng = as_generator(rng)
    a, b = pair
    n = parts.obs.shape[1]
    reps = np.empty(n_boot)
    if isinstance(parts, EpicParts):
        n_m = parts.v_mean.shape[1]
        if parts.next_rows.shape[2] != n_m:
            raise ValueError("EPIC bootstrap needs parts computed with keep_draws=True")
        W = _multinomial_weights(rng, n_m, (n_boot,)).T / n_m          # [n_m, B]
        vals = {}
        for r in (a, b):
            nxt = (parts.next_rows[r] @ W)[parts.next_inv]
            cur = (parts.cur_rows[r] @ W)[parts.cur_inv]
            const = parts.v_mean[r] @ W
            vals[r] = parts.obs[r][:, None] + parts.gamma * nxt - cur - parts.gamma * const[None, :]
        for i in range(n_boot):
            idx = rng.integers(n, size=n)
            reps[i] = pearson_distance(vals[a][idx, i], vals[b][idx, i])
    else:
        n_t = parts.t1.shape[-1]
        for i in range(n_boot):
            idx = rng.integers(n, size=n)
            w1 = _multinomial_weights(rng, n_t, (n,)) / n_t
            w2 = _multinomial_weights(rng, n_t, (n,)) / n_t
            out = []
            for r in (a, b):
                m1 = (parts.t1[r] * w2).sum(-1) / parts.n_a
                m2 = (parts.t2[r] * w1).sum(-1) / parts.n_a
                if parts.t3.ndim == 4:
                    m3 = np.einsum("njl,nj,nl->n", parts.t3[r], w1, w2) / parts.n_a ** 2
                else:
                    m3 = (parts.t3[r] * w2).sum(-1) / parts.n_a
                c = parts.obs[r] + parts.gamma * m1 - m2 - parts.gamma * m3
                out.append(c[idx])
            reps[i] = pearson_distance(out[0], out[1])
    return float(np.std(reps, ddof=1))


@dataclass
class BootstrapResult:
    mean: float
    lo: float
    hi: float
    width: float
    values: np.ndarray


def bootstrap_ci(metric_fn: Callable, population, n: int, k: int, confidence: float = 0.95, rng=None,
                 max_redraws: int = 10) -> BootstrapResult:
    """Percentile interval of a metric over ``k`` random sub-datasets of size ``n``.

    ``population`` is any object supporting ``len`` and ``take(indices)``;
    ``metric_fn(subset, rng)`` returns a float. A draw that raises
    :class:`DegenerateVariance` is redrawn up to ``max_redraws`` times.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    size = len(population)
    if n > size:
        raise ValueError(f"n={n} exceeds population size {size}")
    rng = as_generator(rng)
    values = np.empty(k)
    for i in range(k):
        for attempt in range(max_redraws + 1):
            idx = np.sort(rng.choice(size, size=n, replace=False))
            try:
                values[i] = metric_fn(population.take(idx), rng)
                break
            except DegenerateVariance:
                if attempt == max_redraws:
                    raise
    alpha = (1.0 - confidence) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return BootstrapResult(float(values.mean()), float(lo), float(hi), float(hi - lo), values)


def distances_to_reference(reference: RewardFunction, rewards: Sequence[RewardFunction], batch: CoverageBatch,
                           cfg: MetricConfig, rng, dynamics=None, grid=None, learned_dynamics=None,
                           epic=True) -> dict:
    """All metrics between ``reference`` and each reward, on shared draws.

    Returns ``{name: {"epic": .., "dard": .., "dard_learned": .., "pearson": ..}}``.
    Metrics whose inputs are not given (or EPIC with ``epic=False``) are
    skipped. A reward that is degenerate on the batch gets ``nan`` for the
    affected metric and its name listed under the ``"_degenerate"`` key.
    """
    rng = as_generator(rng)
    allr = [reference] + list(rewards)
    seeds = rng.integers(0, 2**63, size=3)
    canon = {}
    if epic:
        canon["epic"] = epic_canonicalize_many(allr, batch, cfg, seeds[0])
    if dynamics is not None:
        canon["dard"] = dard_transform_many(allr, dynamics, batch, grid, cfg, seeds[1])
    if learned_dynamics is not None:
        canon["dard_learned"] = dard_transform_many(allr, learned_dynamics, batch, grid, cfg, seeds[2])
    raw = np.stack([_evaluate(r, batch.s, batch.a, batch.s_next) for r in allr])
    canon["pearson"] = raw
    out = {"_degenerate": []}
    for i, r in enumerate(rewards, start=1):
        row = {}
        for key, vals in canon.items():
            try:
                row[key] = pearson_distance(vals[0], vals[i])
            except DegenerateVariance:
                row[key] = float("nan")
                if r.name not in out["_degenerate"]:
                    out["_degenerate"].append(r.name)
        out[r.name] = row
    return out
