import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rewdist.bouncing_balls import ConstantVelocityDynamics, GroundTruthReward
from rewdist.core import DegenerateVariance, DynamicsFailure, DynamicsModel, FunctionReward, Rng
from rewdist.metrics import (
    ActionGrid,
    CoverageBatch,
    MetricConfig,
    bootstrap_ci,
    dard_parts,
    dard_transform,
    dard_distance,
    distances_to_reference,
    epic_canonicalize,
    epic_distance,
    epic_parts,
    bootstrap_distance_se,
    pearson_distance,
)
from rewdist.oracle_mdp import TabularDynamics, TabularMdp, TabularReward, TabularRewardFunction
from rewdist.reward_zoo import shaped_ground_truth

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_pearson_basic_values():
    x = np.arange(10.0)
    assert pearson_distance(x, x) == pytest.approx(0.0, abs=1e-15)
    assert pearson_distance(x, -x) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(DegenerateVariance):
        pearson_distance(np.ones(5), x[:5])


def test_pearson_independent_samples():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((2, 1_000_000))
    assert pearson_distance(x, y) == pytest.approx(np.sqrt(0.5), abs=0.003)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 12), elements=finite))
def test_pearson_pseudometric(v):
    x, y, z = v
    try:
        dxy, dyx = pearson_distance(x, y), pearson_distance(y, x)
        dxz, dyz = pearson_distance(x, z), pearson_distance(y, z)
    except DegenerateVariance:
        return
    assert dxy == dyx
    assert 0.0 <= dxy <= 1.0
    assert dxz <= dxy + dyz + 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 12, elements=finite), st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_affine_invariant(x, scale, shift):
    try:
        d = pearson_distance(x, scale * x + shift)
    except DegenerateVariance:
        return
    assert d <= 1e-6


def test_metric_config_validation():
    with pytest.raises(ValueError):
        MetricConfig(n_m=0)
    with pytest.raises(ValueError):
        MetricConfig(gamma=1.5)
    with pytest.raises(ValueError):
        MetricConfig(pairing="bogus")


def test_action_grid_cross_product():
    g = ActionGrid.linspace([(-5, 5), (-5, 5)], 4)
    assert g.actions.shape == (16, 2)
    np.testing.assert_allclose(np.unique(g.actions[:, 0]), [-5.0, -5 / 3, 5 / 3, 5.0])


@pytest.fixture(scope="module")
def ball_batch(uniform_data):
    d = uniform_data
    return CoverageBatch.sample(d.s, d.a, d.s_next, 3000, Rng(0))


def test_constant_reward_canonicalizes_to_zero(ball_batch, ball_config):
    const = FunctionReward(lambda s, a, s2: np.full(len(s), 2.5), "const")
    cfg = MetricConfig(n_m=64)
    grid = ActionGrid.linspace(ball_config.action_bounds, 2)
    np.testing.assert_allclose(epic_canonicalize(const, ball_batch, cfg, Rng(1)), 0.0, atol=1e-12)
    dyn = ConstantVelocityDynamics(ball_config)
    np.testing.assert_allclose(dard_transform(const, dyn, ball_batch, grid, cfg, Rng(1)), 0.0, atol=1e-12)


def test_pure_shaping_maps_to_zero(ball_batch, ball_config):
    shaped = shaped_ground_truth(ball_config)
    gt = GroundTruthReward(ball_config)
    pure = FunctionReward(lambda s, a, s2: shaped.evaluate(s, a, s2) - gt.evaluate(s, a, s2), "pure")
    cfg = MetricConfig(n_m=64)
    grid = ActionGrid.linspace(ball_config.action_bounds, 3)
    dyn = ConstantVelocityDynamics(ball_config)
    np.testing.assert_allclose(dard_transform(pure, dyn, ball_batch, grid, cfg, Rng(1)), 0.0, atol=1e-10)
    # EPIC leaves a constant gamma * (E phi(X) - E phi(X')) behind.
    c = epic_canonicalize(pure, ball_batch, cfg, Rng(1))
    assert np.ptp(c) < 1e-10


def test_distance_identity_and_affine(ball_batch, ball_config):
    shaped = shaped_ground_truth(ball_config)
    affine = FunctionReward(lambda s, a, s2: 3.0 * shaped.evaluate(s, a, s2) - 7.0, "affine")
    cfg = MetricConfig(n_m=64)
    grid = ActionGrid.linspace(ball_config.action_bounds, 2)
    dyn = ConstantVelocityDynamics(ball_config)
    assert epic_distance(shaped, shaped, ball_batch, cfg, Rng(2)) == pytest.approx(0.0, abs=1e-12)
    assert epic_distance(shaped, affine, ball_batch, cfg, Rng(2)) == pytest.approx(0.0, abs=1e-12)
    assert dard_distance(shaped, shaped, dyn, ball_batch, grid, cfg, Rng(2)) == pytest.approx(0.0, abs=1e-12)
    assert dard_distance(shaped, affine, dyn, ball_batch, grid, cfg, Rng(2)) == pytest.approx(0.0, abs=1e-12)


class _BrokenDynamics(DynamicsModel):
    is_deterministic = True

    def sample(self, s, a, rng):
        out = s.copy()
        out[0, 0] = np.nan
        return out


def test_dynamics_failure(ball_batch, ball_config):
    grid = ActionGrid.linspace(ball_config.action_bounds, 2)
    with pytest.raises(DynamicsFailure):
        dard_transform(GroundTruthReward(ball_config), _BrokenDynamics(), ball_batch, grid, MetricConfig(), Rng(0))


def _oracle_setup(pairing="cross"):
    root = Rng(7)
    mdp = TabularMdp.random(4, 2, root.child("mdp"))
    ra = TabularReward.random(4, 2, root.child("ra"))
    rb = ra + 0.5 * TabularReward.random(4, 2, root.child("rb"))
    s, a, s2 = mdp.sample_transitions(2000, root.child("batch"))
    batch = CoverageBatch(s, a, s2, s, a)
    cfg = MetricConfig(n_v=2000, n_m=256, n_t=4, gamma=mdp.gamma, pairing=pairing)
    return mdp, TabularRewardFunction(ra), TabularRewardFunction(rb), batch, cfg


@pytest.mark.parametrize("pairing", ["cross", "independent"])
def test_sampled_dard_shaping_invariance_stochastic(pairing):
    mdp, ra, _, batch, cfg = _oracle_setup(pairing)
    phi = np.array([0.3, -1.2, 2.0, 0.7])
    shaped = TabularRewardFunction(ra.table + mdp.gamma * phi[None, None, :] - phi[:, None, None])
    grid, dyn = mdp.action_grid(), TabularDynamics(mdp)
    ca = dard_transform(ra, dyn, batch, grid, cfg, Rng(3))
    cb = dard_transform(shaped, dyn, batch, grid, cfg, Rng(3))
    np.testing.assert_allclose(ca, cb, atol=1e-10)


def test_bootstrap_se_positive_and_small():
    mdp, ra, rb, batch, cfg = _oracle_setup()
    parts = epic_parts([ra, rb], batch, cfg, Rng(4), keep_draws=True)
    se_epic = bootstrap_distance_se(parts, 30, Rng(5))
    parts = dard_parts([ra, rb], TabularDynamics(mdp), batch, mdp.action_grid(), cfg, Rng(4))
    se_dard = bootstrap_distance_se(parts, 30, Rng(5))
    assert 0.0 < se_epic < 0.05
    assert 0.0 < se_dard < 0.05


def test_bootstrap_ci_constant_metric():
    mdp, ra, rb, batch, cfg = _oracle_setup()
    res = bootstrap_ci(lambda sub, rng: 0.5, batch, 100, 5, rng=Rng(0))
    assert res.mean == 0.5 and res.width == 0.0
    with pytest.raises(ValueError):
        bootstrap_ci(lambda sub, rng: 0.5, batch, 100, 1)


def test_bootstrap_ci_redraws_then_aborts():
    mdp, ra, rb, batch, cfg = _oracle_setup()
    calls = []

    def bad(sub, rng):
        calls.append(1)
        raise DegenerateVariance("always")

    with pytest.raises(DegenerateVariance):
        bootstrap_ci(bad, batch, 50, 3, rng=Rng(0))
    assert len(calls) == 11


def test_distances_to_reference_flags_degenerate(ball_batch, ball_config):
    const = FunctionReward(lambda s, a, s2: np.ones(len(s)), "const")
    out = distances_to_reference(shaped_ground_truth(ball_config), [const], ball_batch, MetricConfig(n_m=16), Rng(0))
    assert out["_degenerate"] == ["const"]
    assert np.isnan(out["const"]["pearson"])
