"""Desk-scale Bouncing Balls navigation environment.

An agent ball accelerates toward a goal while other balls drift under
small random accelerations. Balls bounce off the arena walls and pass
through each other.

State layout (``4 * n_balls + 2`` floats)::

    [agent px, py, vx, vy, (other px, py, vx, vy) * (n_balls - 1), goal gx, gy]
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .core import (
    DynamicsModel,
    OutOfBoundsAction,
    PotentialFunction,
    RewardFunction,
    Rng,
    SchemaMismatch,
    as_generator,
)

SCHEMA_ID = "bouncing_balls/v1"


@dataclass(frozen=True)
class BallWorldConfig:
    arena: float = 20.0
    n_balls: int = 4
    ball_radius: float = 0.5
    dt: float = 0.1
    accel_bound: float = 5.0
    other_accel_std: float = 0.5
    goal_threshold: float = 1.0
    horizon: int = 400
    max_speed: float = 5.0
    init_other_speed: float = 2.0

    def __post_init__(self):
        if self.goal_threshold <= 0 or self.horizon <= 0:
            raise ValueError("goal_threshold and horizon must be positive")
        if self.n_balls < 1 or self.arena <= 2 * self.ball_radius:
            raise ValueError("invalid arena or ball count")

    @property
    def state_dim(self):
        return 4 * self.n_balls + 2

    @property
    def action_dim(self):
        return 2

    @property
    def action_bounds(self):
        return ((-self.accel_bound, self.accel_bound),) * 2

    @property
    def lo(self):
        return self.ball_radius

    @property
    def hi(self):
        return self.arena - self.ball_radius

    def to_dict(self):
        return asdict(self)


# -- state accessors (row-batched) ----------------------------------------


def ball_slice(k):
    return slice(4 * k, 4 * k + 4)


def positions(states, cfg: BallWorldConfig):
    """Ball positions as ``[N, n_balls, 2]`` (agent is ball 0)."""
    return states[:, : 4 * cfg.n_balls].reshape(-1, cfg.n_balls, 4)[:, :, :2]


def velocities(states, cfg: BallWorldConfig):
    return states[:, : 4 * cfg.n_balls].reshape(-1, cfg.n_balls, 4)[:, :, 2:]


def goal(states):
    return states[:, -2:]


def goal_distance(states):
    return np.hypot(states[:, 0] - states[:, -2], states[:, 1] - states[:, -1])


def check_schema(states, cfg: BallWorldConfig):
    if states.ndim != 2 or states.shape[1] != cfg.state_dim:
        raise SchemaMismatch(f"expected states with {cfg.state_dim} columns, got shape {states.shape}")


def reflect(pos, vel, lo, hi):
    """Mirror positions that left ``[lo, hi]`` back inside and negate those velocity components."""
    pos = pos.copy()
    vel = vel.copy()
    over = pos > hi
    pos[over] = 2 * hi - pos[over]
    under = pos < lo
    pos[under] = 2 * lo - pos[under]
    flip = over | under
    vel[flip] = -vel[flip]
    # An overshoot larger than the arena is impossible at the configured speeds.
    np.clip(pos, lo, hi, out=pos)
    return pos, vel


def clamp_speed(vel, max_speed):
    speed = np.linalg.norm(vel, axis=-1, keepdims=True)
    scale = np.minimum(1.0, max_speed / np.maximum(speed, 1e-300))
    return vel * scale


def kinematics(states, agent_acc, other_acc, cfg: BallWorldConfig):
    """One semi-implicit Euler step with wall reflection (no goal handling).

    ``agent_acc`` is ``[N, 2]``; ``other_acc`` is ``[N, n_balls - 1, 2]``.
    """
    n = states.shape[0]
    balls = states[:, : 4 * cfg.n_balls].reshape(n, cfg.n_balls, 4)
    acc = np.concatenate([agent_acc[:, None, :], other_acc], axis=1)
    vel = clamp_speed(balls[:, :, 2:] + acc * cfg.dt, cfg.max_speed)
    pos = balls[:, :, :2] + vel * cfg.dt
    pos, vel = reflect(pos, vel, cfg.lo, cfg.hi)
    out = np.empty_like(states)
    out[:, : 4 * cfg.n_balls] = np.concatenate([pos, vel], axis=2).reshape(n, -1)
    out[:, -2:] = states[:, -2:]
    return out


class StepResult(NamedTuple):
    next_state: np.ndarray
    reward: float
    done: bool
    continue_state: np.ndarray


class BouncingBalls:
    """Environment wrapper around :func:`kinematics`.

    ``step`` reports the post-motion state as the transition's ``s'``. When
    the goal is reached, the agent and goal are moved to fresh random
    positions in ``continue_state``, which is where the next transition
    starts. Keeping ``s'`` pre-respawn keeps every recorded transition
    physically consistent.
    """

    name = "bouncing_balls"
    schema_id = SCHEMA_ID

    def __init__(self, config: BallWorldConfig | None = None):
        self.config = config or BallWorldConfig()

    @property
    def state_dim(self):
        return self.config.state_dim

    @property
    def action_dim(self):
        return self.config.action_dim

    @property
    def action_bounds(self):
        return self.config.action_bounds

    def reset(self, rng) -> np.ndarray:
        return _initial_states(self.config, as_generator(rng), 1)[0]

    def step(self, state, action, rng) -> StepResult:
        cfg = self.config
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (2,) or np.any(np.abs(action) > cfg.accel_bound):
            raise OutOfBoundsAction(f"action {action} outside [-{cfg.accel_bound}, {cfg.accel_bound}]^2")
        rng = as_generator(rng)
        other = rng.normal(0.0, cfg.other_accel_std, size=(1, cfg.n_balls - 1, 2))
        nxt = kinematics(state[None], action[None], other, cfg)[0]
        reward = float(goal_distance(nxt[None])[0] <= cfg.goal_threshold)
        cont = nxt
        if reward:
            cont = self.respawn(nxt, rng)
        return StepResult(nxt, reward, False, cont)

    def respawn(self, state, rng) -> np.ndarray:
        cfg = self.config
        rng = as_generator(rng)
        out = np.array(state, dtype=np.float64)
        while True:
            agent, g = rng.uniform(cfg.lo, cfg.hi, size=(2, 2))
            if np.linalg.norm(agent - g) > cfg.goal_threshold:
                break
        out[0:2] = agent
        out[-2:] = g
        return out


def _initial_states(cfg: BallWorldConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    states = np.zeros((n, cfg.state_dim))
    pos = rng.uniform(cfg.lo, cfg.hi, size=(n, cfg.n_balls, 2))
    vel = rng.uniform(-cfg.init_other_speed, cfg.init_other_speed, size=(n, cfg.n_balls, 2))
    vel[:, 0] = 0.0
    vel = clamp_speed(vel, cfg.max_speed)
    states[:, : 4 * cfg.n_balls] = np.concatenate([pos, vel], axis=2).reshape(n, -1)
    g = rng.uniform(cfg.lo, cfg.hi, size=(n, 2))
    # Start the agent off-goal.
    close = np.linalg.norm(pos[:, 0] - g, axis=1) <= cfg.goal_threshold
    g[close] = cfg.arena - g[close]
    states[:, -2:] = g
    return states


# -- policies ---------------------------------------------------------------


def uniform_policy(states, rng, cfg: BallWorldConfig | None = None):
    """I.i.d. uniform accelerations over the action box."""
    cfg = cfg or BallWorldConfig()
    single = np.ndim(states) == 1
    n = 1 if single else np.shape(states)[0]
    acts = as_generator(rng).uniform(-cfg.accel_bound, cfg.accel_bound, size=(n, 2))
    return acts[0] if single else acts


def scripted_expert(states, cfg: BallWorldConfig | None = None, kp=2.0, kd=2.5, repulse=6.0, radius=2.5):
    """PD controller toward the goal plus inverse-square repulsion from nearby balls."""
    cfg = cfg or BallWorldConfig()
    single = np.ndim(states) == 1
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    pos = positions(states, cfg)
    vel = velocities(states, cfg)
    p, v = pos[:, 0], vel[:, 0]
    acc = kp * (goal(states) - p) - kd * v
    if cfg.n_balls > 1:
        diff = p[:, None, :] - pos[:, 1:]
        dist = np.linalg.norm(diff, axis=2, keepdims=True)
        push = repulse * diff / np.maximum(dist, 1e-6) ** 3
        acc = acc + np.where(dist < radius, push, 0.0).sum(axis=1)
    acc = np.clip(acc, -cfg.accel_bound, cfg.accel_bound)
    return acc[0] if single else acc


POLICIES = ("uniform", "expert")


def rollout_episodes(cfg: BallWorldConfig, policy: str, n_episodes: int, rng: Rng, horizon: int | None = None):
    """Run ``n_episodes`` episodes in lockstep.

    Each episode draws from its own child stream ``episode/<i>``, so the
    first episodes of a longer run equal those of a shorter one.
    Returns ``(s, a, s_next, r)`` arrays of shape ``[n_episodes, horizon, ...]``.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    H = horizon or cfg.horizon
    E = n_episodes
    gens = [rng.child(f"episode/{e}").generator for e in range(E)]
    init = np.stack([_initial_states(cfg, g, 1)[0] for g in gens])
    other_noise = np.stack([g.normal(0.0, cfg.other_accel_std, size=(H, cfg.n_balls - 1, 2)) for g in gens], axis=1)
    unif_actions = np.stack([g.uniform(-cfg.accel_bound, cfg.accel_bound, size=(H, 2)) for g in gens], axis=1)
    respawn = np.stack([g.uniform(cfg.lo, cfg.hi, size=(H, 4, 4)) for g in gens], axis=1)

    S = np.empty((H, E, cfg.state_dim))
    A = np.empty((H, E, 2))
    S2 = np.empty((H, E, cfg.state_dim))
    R = np.empty((H, E))
    state = init
    for t in range(H):
        act = unif_actions[t] if policy == "uniform" else scripted_expert(state, cfg)
        nxt = kinematics(state, act, other_noise[t], cfg)
        hit = goal_distance(nxt) <= cfg.goal_threshold
        S[t], A[t], S2[t], R[t] = state, act, nxt, hit
        state = nxt.copy()
        if hit.any():
            cand = respawn[t][hit]                        # [h, tries, 4]
            ok = np.linalg.norm(cand[:, :, 0:2] - cand[:, :, 2:4], axis=2) > cfg.goal_threshold
            pick = np.where(ok.any(axis=1), ok.argmax(axis=1), cand.shape[1] - 1)
            chosen = cand[np.arange(len(cand)), pick]
            state[hit, 0:2] = chosen[:, 0:2]
            state[hit, -2:] = chosen[:, 2:4]
    swap = lambda x: np.swapaxes(x, 0, 1)
    return swap(S), swap(A), swap(S2), swap(R)


# -- reward, potential and dynamics ----------------------------------------


class GroundTruthReward(RewardFunction):
    """1 when the agent is within the goal threshold in s', else 0."""

    name = "GT"

    def __init__(self, config: BallWorldConfig | None = None):
        self.config = config or BallWorldConfig()

    def evaluate(self, s, a, s_next):
        check_schema(s_next, self.config)
        return (goal_distance(s_next) <= self.config.goal_threshold).astype(np.float64)


class SqrtGoalPotential(PotentialFunction):
    """Negative square root of the agent-goal distance."""

    name = "sqrt_goal"

    def __init__(self, config: BallWorldConfig | None = None):
        self.config = config or BallWorldConfig()

    def evaluate(self, states):
        check_schema(states, self.config)
        return -np.sqrt(goal_distance(states))


def sqrt_goal_potential(states, config: BallWorldConfig | None = None):
    return SqrtGoalPotential(config)(states)


class ConstantVelocityDynamics(DynamicsModel):
    """Deterministic transition model: the agent applies the action, others coast.

    Uses the environment's integrator and wall reflection with zero
    acceleration on the other balls (the mean of their random
    accelerations). The goal never moves.
    """

    is_deterministic = True

    def __init__(self, config: BallWorldConfig | None = None):
        self.config = config or BallWorldConfig()

    def sample(self, s, a, rng=None):
        cfg = self.config
        check_schema(s, cfg)
        zeros = np.zeros((s.shape[0], cfg.n_balls - 1, 2))
        return kinematics(s, a, zeros, cfg)
