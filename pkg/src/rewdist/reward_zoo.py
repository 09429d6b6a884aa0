"""Hand-designed reward models and wrappers for Bouncing Balls.

Wrappers that inject noise draw it from a hash of the transition's
contents, so every reward here is a pure function of ``(s, a, s')``.
"""

from __future__ import annotations

import json

import numpy as np

from .bouncing_balls import (
    BallWorldConfig,
    GroundTruthReward,
    SqrtGoalPotential,
    check_schema,
    goal_distance,
    positions,
    velocities,
)
from .core import DEFAULT_GAMMA, PotentialFunction, RewardFunction, ZeroPotential, as_generator

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def transition_hash(s, a, s_next, salt: int = 0) -> np.ndarray:
    """64-bit hash of each row's exact float contents."""
    # Adding 0.0 maps -0.0 to 0.0 so equal values hash equally.
    # Column-major copy so each column is contiguous.
    cols = np.concatenate([s.T, a.T, s_next.T]).astype(np.float64) + 0.0
    bits = cols.view(np.uint64)
    h = _mix(np.full(cols.shape[1], np.uint64(salt & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64))
    for col in bits:
        h ^= col
        h *= _M1
        h ^= h >> np.uint64(29)
    return _mix(_mix(h))


def transition_noise(s, a, s_next, salt: int = 0) -> np.ndarray:
    """Standard normal draw per row, deterministic in the row contents."""
    h1 = transition_hash(s, a, s_next, salt)
    h2 = _mix(h1)
    scale = 1.0 / 2.0**53
    u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 0.5) * scale
    u2 = ((h2 >> np.uint64(11)).astype(np.float64) + 0.5) * scale
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class ShapedReward(RewardFunction):
    """``base + gamma * phi(s') - phi(s)``."""

    def __init__(self, base: RewardFunction, phi: PotentialFunction, gamma=DEFAULT_GAMMA, name="SHAPED"):
        self.base = base
        self.phi = phi
        self.gamma = gamma
        self.name = name

    def evaluate(self, s, a, s_next):
        out = self.base.evaluate(s, a, s_next)
        if isinstance(self.phi, ZeroPotential):
            return out
        return out + self.gamma * self.phi.evaluate(s_next) - self.phi.evaluate(s)


def feasibility_predicate(s, a, s_next, config: BallWorldConfig | None = None, tol=None) -> np.ndarray:
    """Whether each transition is (nearly) reachable in one environment step.

    For every ball, the position in s' must lie within
    ``tol + max_accel * dt**2`` of the coasting prediction
    ``pos(s) + vel(s) * dt`` (folded back inside the walls), where
    ``max_accel`` is the largest agent acceleration norm. The agent action
    must also lie inside its bounds.
    """
    cfg = config or BallWorldConfig()
    check_schema(s, cfg)
    check_schema(s_next, cfg)
    tol = default_feasibility_tol(cfg) if tol is None else tol
    pred = positions(s, cfg) + velocities(s, cfg) * cfg.dt
    # Fold into the arena like a wall bounce would (velocity is irrelevant here).
    lo, hi = cfg.lo, cfg.hi
    pred = np.where(pred > hi, 2 * hi - pred, pred)
    pred = np.where(pred < lo, 2 * lo - pred, pred)
    diff = positions(s_next, cfg) - pred
    err = np.hypot(diff[..., 0], diff[..., 1]).max(axis=1)
    max_accel = cfg.accel_bound * np.sqrt(2.0)
    in_bounds = np.all(np.abs(a) <= cfg.accel_bound + 1e-12, axis=1)
    return (err <= tol + max_accel * cfg.dt**2) & in_bounds


def default_feasibility_tol(cfg: BallWorldConfig) -> float:
    """Extra displacement slack on top of one step of maximal acceleration.

    The last expectation of the dynamics-aware transform pairs a state
    predicted from s with one predicted from s', which can differ from an
    exact step by up to four further steps of maximal acceleration.
    Those transitions must count as feasible.
    """
    return 1e-6 * cfg.arena + 4.5 * cfg.accel_bound * np.sqrt(2.0) * cfg.dt**2


class FeasibilityReward(RewardFunction):
    """``base`` on feasible transitions, seeded unit Gaussian noise elsewhere."""

    def __init__(self, base: RewardFunction, config: BallWorldConfig | None = None, tol=None,
                 noise_std=1.0, salt=0x5EED, name="FEASIBILITY"):
        self.base = base
        self.config = config or BallWorldConfig()
        self.tol = default_feasibility_tol(self.config) if tol is None else tol
        self.noise_std = noise_std
        self.salt = salt
        self.name = name

    def evaluate(self, s, a, s_next):
        ok = feasibility_predicate(s, a, s_next, self.config, self.tol)
        out = self.base.evaluate(s, a, s_next).astype(np.float64, copy=True)
        if not ok.all():
            bad = ~ok
            out[bad] = self.noise_std * transition_noise(s[bad], a[bad], s_next[bad], self.salt)
        return out


class NoisyReward(RewardFunction):
    """``base + sigma * eps`` with ``eps`` a hash-seeded standard normal."""

    def __init__(self, base: RewardFunction, sigma: float, salt=0xD1CE, name=None):
        self.base = base
        self.sigma = float(sigma)
        self.salt = salt
        self.name = name or f"NOISY(sigma={self.sigma:g})"

    def evaluate(self, s, a, s_next):
        out = self.base.evaluate(s, a, s_next)
        if self.sigma == 0.0:
            return out
        return out + self.sigma * transition_noise(s, a, s_next, self.salt)


class RandomLinearReward(RewardFunction):
    """``-w_dist * dist(s') - w_act * |a| + w_goal * goal_reached(s')``."""

    def __init__(self, w_dist, w_act, w_goal, config: BallWorldConfig | None = None, name=None):
        self.w_dist = float(w_dist)
        self.w_act = float(w_act)
        self.w_goal = float(w_goal)
        self.config = config or BallWorldConfig()
        self.name = name or f"RAND({self.w_dist:.3f},{self.w_act:.3f},{self.w_goal:+.3f})"

    @property
    def weights(self):
        return (self.w_dist, self.w_act, self.w_goal)

    def evaluate(self, s, a, s_next):
        check_schema(s_next, self.config)
        d = goal_distance(s_next)
        reached = (d <= self.config.goal_threshold).astype(np.float64)
        return -self.w_dist * d - self.w_act * np.linalg.norm(a, axis=1) + self.w_goal * reached


def sample_random_reward(rng, config: BallWorldConfig | None = None, name=None) -> RandomLinearReward:
    rng = as_generator(rng)
    w_dist, w_act = rng.uniform(0.0, 1.0, size=2)
    w_goal = rng.uniform(-1.0, 1.0)
    return RandomLinearReward(w_dist, w_act, w_goal, config, name)


def shaped_ground_truth(config: BallWorldConfig | None = None, gamma=DEFAULT_GAMMA) -> ShapedReward:
    config = config or BallWorldConfig()
    return ShapedReward(GroundTruthReward(config), SqrtGoalPotential(config), gamma)


def hand_designed_rewards(config: BallWorldConfig | None = None, gamma=DEFAULT_GAMMA):
    """GT, SHAPED and FEASIBILITY (wrapping SHAPED)."""
    config = config or BallWorldConfig()
    gt = GroundTruthReward(config)
    shaped = shaped_ground_truth(config, gamma)
    return {"GT": gt, "SHAPED": shaped, "FEASIBILITY": FeasibilityReward(shaped, config)}


# -- JSON specs -------------------------------------------------------------

_POTENTIALS = {"sqrt_goal": SqrtGoalPotential, "zero": lambda cfg=None: ZeroPotential()}


def reward_from_spec(spec, config: BallWorldConfig | None = None, gamma=DEFAULT_GAMMA) -> RewardFunction:
    """Build a reward from a JSON-compatible dict (or JSON string).

    Kinds: ``ground_truth``, ``shaped``, ``feasibility``, ``noisy``,
    ``random_linear`` and ``learned`` (``{"path": checkpoint}``). Wrapper
    kinds take their wrapped reward under ``"base"`` (default: ground truth
    for ``shaped``/``noisy``, SHAPED for ``feasibility``).
    """
    if isinstance(spec, str):
        spec = json.loads(spec)
    config = config or BallWorldConfig()
    kind = spec.get("kind")
    name = spec.get("name")
    gamma = spec.get("gamma", gamma)

    def sub(key, default):
        return reward_from_spec(spec[key], config, gamma) if key in spec else default()

    if kind == "ground_truth":
        r = GroundTruthReward(config)
    elif kind == "shaped":
        base = sub("base", lambda: GroundTruthReward(config))
        phi = _POTENTIALS[spec.get("potential", "sqrt_goal")](config)
        r = ShapedReward(base, phi, gamma)
    elif kind == "feasibility":
        base = sub("base", lambda: shaped_ground_truth(config, gamma))
        r = FeasibilityReward(base, config, tol=spec.get("tol"), noise_std=spec.get("noise_std", 1.0))
    elif kind == "noisy":
        base = sub("base", lambda: GroundTruthReward(config))
        r = NoisyReward(base, spec["sigma"], salt=spec.get("salt", 0xD1CE))
    elif kind == "random_linear":
        r = RandomLinearReward(spec["w_dist"], spec["w_act"], spec["w_goal"], config)
    elif kind == "learned":
        from .learners import load_reward_model

        r = load_reward_model(spec["path"])
    else:
        raise ValueError(f"unknown reward kind {kind!r}")
    if name:
        r.name = name
    return r
