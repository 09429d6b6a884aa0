import json

import numpy as np
import pytest

from rewdist.bouncing_balls import BallWorldConfig, ConstantVelocityDynamics, GroundTruthReward
from rewdist.core import Rng, ZeroPotential
from rewdist.metrics import ActionGrid, CoverageBatch, MetricConfig, dard_distance
from rewdist.reward_zoo import (
    FeasibilityReward,
    NoisyReward,
    RandomLinearReward,
    ShapedReward,
    feasibility_predicate,
    hand_designed_rewards,
    reward_from_spec,
    sample_random_reward,
    transition_noise,
)


def test_shaping_with_zero_potential_is_identity(uniform_data, ball_config):
    d = uniform_data
    gt = GroundTruthReward(ball_config)
    shaped = ShapedReward(gt, ZeroPotential())
    np.testing.assert_array_equal(shaped(d.s, d.a, d.s_next), gt(d.s, d.a, d.s_next))


def test_collected_transitions_are_feasible(uniform_data, expert_data, ball_config):
    for d in (uniform_data, expert_data):
        assert feasibility_predicate(d.s, d.a, d.s_next, ball_config).all()


def test_teleport_is_infeasible(ball_config):
    s = np.zeros((1, ball_config.state_dim)) + 5.0
    s2 = s.copy()
    s2[0, 0] += ball_config.arena / 2
    assert not feasibility_predicate(s, np.zeros((1, 2)), s2, ball_config)[0]


def test_epic_style_triples_rarely_feasible(uniform_data, ball_config):
    rng = np.random.default_rng(0)
    d = uniform_data
    i, j = rng.integers(len(d), size=(2, 20_000))
    a = rng.uniform(-5, 5, size=(20_000, 2))
    assert feasibility_predicate(d.s[i], a, d.s_next[j], ball_config).mean() <= 0.05


def test_feasibility_reward_values(uniform_data, ball_config):
    d = uniform_data
    rewards = hand_designed_rewards(ball_config)
    feas, shaped = rewards["FEASIBILITY"], rewards["SHAPED"]
    np.testing.assert_array_equal(feas(d.s, d.a, d.s_next), shaped(d.s, d.a, d.s_next))
    j = np.roll(np.arange(len(d)), 997)
    out = feas(d.s, d.a, d.s_next[j])
    np.testing.assert_array_equal(out, feas(d.s, d.a, d.s_next[j]))
    assert not np.allclose(out, shaped(d.s, d.a, d.s_next[j]))


def test_noise_is_pure_and_standard():
    rng = np.random.default_rng(0)
    s, s2 = rng.normal(size=(2, 50_000, 6))
    a = rng.normal(size=(50_000, 2))
    e = transition_noise(s, a, s2, 3)
    assert abs(e.mean()) < 0.02 and abs(e.std() - 1.0) < 0.02
    np.testing.assert_array_equal(transition_noise(s[::-1], a[::-1], s2[::-1], 3), e[::-1])
    assert not np.array_equal(transition_noise(s, a, s2, 4), e)
    # Signed zero must not change the draw.
    z = np.zeros((1, 2))
    assert transition_noise(z, z, z)[0] == transition_noise(-z, z, z)[0]


def test_noisy_reward_sigma_zero(uniform_data, ball_config):
    d = uniform_data
    gt = GroundTruthReward(ball_config)
    np.testing.assert_array_equal(NoisyReward(gt, 0.0)(d.s, d.a, d.s_next), gt(d.s, d.a, d.s_next))
    assert NoisyReward(gt, 0.5).name == "NOISY(sigma=0.5)"


def test_random_reward_weights_ranges():
    rng = np.random.default_rng(1)
    ws = np.array([sample_random_reward(rng).weights for _ in range(500)])
    assert np.all((ws[:, :2] >= 0) & (ws[:, :2] <= 1))
    assert ws[:, 2].min() < -0.5 and ws[:, 2].max() > 0.5


def test_goal_only_random_reward_matches_gt(uniform_data, ball_config):
    d = uniform_data
    batch = CoverageBatch.sample(d.s, d.a, d.s_next, 4000, Rng(0))
    cfg = MetricConfig(n_m=32)
    grid = ActionGrid.linspace(ball_config.action_bounds, 4)
    dist = dard_distance(
        GroundTruthReward(ball_config), RandomLinearReward(0, 0, 1, ball_config),
        ConstantVelocityDynamics(ball_config), batch, grid, cfg, Rng(1),
    )
    assert dist <= 0.01


def test_reward_spec_round_trip(uniform_data, ball_config):
    d = uniform_data
    spec = {"kind": "feasibility", "base": {"kind": "shaped", "potential": "sqrt_goal"}, "name": "F"}
    r = reward_from_spec(json.dumps(spec), ball_config)
    assert isinstance(r, FeasibilityReward) and r.name == "F"
    ref = hand_designed_rewards(ball_config)["FEASIBILITY"]
    j = np.roll(np.arange(len(d)), 5)
    np.testing.assert_array_equal(r(d.s, d.a, d.s_next[j]), ref(d.s, d.a, d.s_next[j]))
    lin = reward_from_spec({"kind": "random_linear", "w_dist": 0.2, "w_act": 0.3, "w_goal": -1}, ball_config)
    assert lin.weights == (0.2, 0.3, -1.0)
    with pytest.raises(ValueError):
        reward_from_spec({"kind": "nope"})


def test_custom_config_respected():
    cfg = BallWorldConfig(arena=8.0, goal_threshold=1.5)
    s = np.zeros((1, cfg.state_dim))
    s[0, -2:] = (1.0, 0.0)
    assert reward_from_spec({"kind": "ground_truth"}, cfg)(s, np.zeros((1, 2)), s)[0] == 1.0
