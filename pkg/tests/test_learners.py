import dataclasses

import numpy as np
import pytest

from rewdist.bouncing_balls import BallWorldConfig, ConstantVelocityDynamics, positions
from rewdist.core import DivergenceDetected, FunctionReward, Rng, SingularSystem
from rewdist.datasets import collect, split
from rewdist.learners import (
    Adam,
    FeatureExtractor,
    Mlp,
    TrainHyper,
    fit_dynamics_lsq,
    fit_dynamics_mlp,
    grad_check,
    load_model,
    load_reward_model,
    mse_loss,
    preference_loss,
    preference_probability,
    save_model,
    segments,
    train_preferences,
    train_regress,
    train_regress_ood,
)
from rewdist.reward_zoo import shaped_ground_truth

FAST = TrainHyper(max_epochs=30, patience=5, pairs_per_epoch=1024)


@pytest.fixture(scope="module")
def splits(uniform_data):
    return split(uniform_data, (0.8, 0.1, 0.1), seed=0)


def test_linear_mse_gradient_exact():
    rng = np.random.default_rng(0)
    mlp = Mlp([4, 1])
    X, y = rng.normal(size=(50, 4)), rng.normal(size=(50, 1))
    assert grad_check(lambda p: mse_loss(mlp, p, X, y), mlp.init_params(rng)) <= 1e-7


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_mlp_mse_gradient(activation):
    rng = np.random.default_rng(1)
    mlp = Mlp([5, 8, 8, 2], activation)
    X, y = rng.normal(size=(40, 5)), rng.normal(size=(40, 2))
    assert grad_check(lambda p: mse_loss(mlp, p, X, y), mlp.init_params(rng), n_check=100) <= 1e-4


def test_preference_gradient():
    rng = np.random.default_rng(2)
    mlp = Mlp([3, 6, 6, 1])
    X1, X2 = rng.normal(size=(2, 7, 4, 3))
    y = rng.choice([0.0, 0.5, 1.0], size=7)
    assert grad_check(lambda p: preference_loss(mlp, p, X1, X2, y, 0.05), mlp.init_params(rng), n_check=100) <= 1e-4


def test_adam_zero_gradient_is_noop():
    p = np.arange(5.0)
    np.testing.assert_array_equal(Adam(5, lr=0.1).step(p, np.zeros(5)), p)


def test_adam_clips_gradient_norm():
    opt = Adam(2, lr=1.0, grad_clip=1.0)
    opt.step(np.zeros(2), np.array([30.0, 40.0]))
    np.testing.assert_allclose(opt.m, 0.1 * np.array([0.6, 0.8]))


def test_feature_standardization(uniform_data, ball_config):
    d = uniform_data
    f = FeatureExtractor(ball_config).fit(d.s, d.a, d.s_next)
    X = f(d.s, d.a, d.s_next)
    assert X.shape == (len(d), f.n_features)
    np.testing.assert_allclose(X.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(X.std(axis=0), 1.0, atol=1e-9)
    with pytest.raises(RuntimeError):
        FeatureExtractor(ball_config)(d.s, d.a, d.s_next)


def test_regress_zero_target(splits, ball_config):
    train, val, _ = splits
    zero = FunctionReward(lambda s, a, s2: np.zeros(len(s)), "zero")
    model = train_regress(train, val, zero, TrainHyper(), 0, ball_config)
    assert np.abs(model(val.s, val.a, val.s_next)).max() <= 0.01


def test_regress_linear_target(splits, ball_config):
    train, val, _ = splits
    f = FeatureExtractor(ball_config).fit(train.s, train.a, train.s_next)
    w = np.linspace(-0.5, 0.5, f.n_features)
    target = FunctionReward(lambda s, a, s2: f(s, a, s2) @ w, "linear")
    model = train_regress(train, val, target, FAST, 0, ball_config)
    err = model(val.s, val.a, val.s_next) - target(val.s, val.a, val.s_next)
    assert np.mean(err**2) <= 1e-3


def test_regress_deterministic_and_checkpoint(splits, ball_config, tmp_path):
    train, val, _ = splits
    hyper = TrainHyper(max_epochs=3)
    target = shaped_ground_truth(ball_config)
    a = train_regress(train, val, target, hyper, 4, ball_config)
    b = train_regress(train, val, target, hyper, 4, ball_config)
    np.testing.assert_array_equal(a.params, b.params)
    save_model(a, tmp_path / "m.json")
    c = load_reward_model(tmp_path / "m.json")
    np.testing.assert_array_equal(c(val.s, val.a, val.s_next), a(val.s, val.a, val.s_next))
    assert c.manifest == a.manifest


def test_ood_with_zero_pairs_equals_regress(splits, ball_config):
    train, val, _ = splits
    hyper = TrainHyper(max_epochs=2, n_random_pairs=0)
    target = shaped_ground_truth(ball_config)
    a = train_regress(train, val, target, hyper, 1, ball_config)
    b = train_regress_ood(train, val, target, hyper, 1, ball_config)
    np.testing.assert_array_equal(a.params, b.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(splits, ball_config):
    train, val, _ = splits
    inf = FunctionReward(lambda s, a, s2: np.full(len(s), np.inf), "inf")
    with pytest.raises(DivergenceDetected):
        train_regress(train, val, inf, FAST, 0, ball_config)


def test_segments_stay_inside_episodes(splits):
    train = splits[0]
    segs = segments(train, 25)
    assert segs.shape[1] == 25
    assert np.all(train.episode[segs] == train.episode[segs[:, :1]])
    assert np.all(np.diff(train.t[segs], axis=1) == 1)


def test_identical_segments_half(splits, ball_config):
    train, val, _ = splits
    model = train_regress(train, val, shaped_ground_truth(ball_config), TrainHyper(max_epochs=1), 0, ball_config)
    seg = (val.s[:25], val.a[:25], val.s_next[:25])
    assert preference_probability(model, seg, seg) == 0.5


def test_preferences_recover_linear_return(splits, ball_config):
    train, val, test = splits
    # Replace the recorded return with a known linear feature: the x action.
    relabel = lambda d: dataclasses.replace(d, r_gt=d.a[:, 0].copy())
    hyper = dataclasses.replace(FAST, gamma=1.0)
    model = train_preferences(relabel(train), relabel(val), hyper, 0, ball_config)
    segs = segments(test, 25)
    rng = np.random.default_rng(0)
    i, j = rng.integers(len(segs), size=(2, 500))
    keep = i != j
    true = test.a[segs, 0].sum(axis=1)
    pred = model(test.s, test.a, test.s_next)[segs].sum(axis=1)
    i, j = i[keep], j[keep]
    acc = np.mean((true[i] > true[j]) == (pred[i] > pred[j]))
    assert acc >= 0.9


def test_lsq_recovers_timestep():
    cfg = BallWorldConfig(other_accel_std=0.0)
    d = collect(cfg, "uniform", 20_000, 3)
    dyn = fit_dynamics_lsq(d, cfg)
    # rows: [vx, vy, ax, ay, 1]; columns: [dpx, dpy, dvx, dvy]
    assert dyn.agent_coef[0, 0] == pytest.approx(cfg.dt, abs=1e-6)
    assert dyn.other_coef[0, 0] == pytest.approx(cfg.dt, abs=1e-6)
    assert dyn.agent_coef[2, 0] == pytest.approx(cfg.dt**2, abs=1e-6)


def test_lsq_heldout_rmse(splits, ball_config):
    train, _, test = splits
    dyn = fit_dynamics_lsq(train, ball_config)
    err = positions(dyn.sample(test.s, test.a), ball_config) - positions(test.s_next, ball_config)
    rmse = np.sqrt(np.mean(err**2))
    floor = ball_config.other_accel_std * ball_config.dt**2
    assert rmse <= 2 * floor


def test_lsq_singular(uniform_data):
    with pytest.raises(SingularSystem):
        fit_dynamics_lsq(dataclasses.replace(uniform_data, a=np.zeros_like(uniform_data.a)))


def test_lsq_checkpoint_round_trip(splits, ball_config, tmp_path):
    dyn = fit_dynamics_lsq(splits[0], ball_config)
    save_model(dyn, tmp_path / "d.json")
    back = load_model(tmp_path / "d.json")
    s, a = splits[2].s[:50], splits[2].a[:50]
    np.testing.assert_array_equal(back.sample(s, a), dyn.sample(s, a))


def test_mlp_dynamics_close_to_truth(splits, ball_config):
    train, val, test = splits
    dyn = fit_dynamics_mlp(train, val, ball_config, TrainHyper(max_epochs=10, patience=3, lr=3e-3), 0)
    pred = positions(dyn.sample(test.s, test.a), ball_config)
    ref = positions(ConstantVelocityDynamics(ball_config).sample(test.s, test.a), ball_config)
    assert np.sqrt(np.mean((pred - ref) ** 2)) < 0.05
