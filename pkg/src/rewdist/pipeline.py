"""Experiment orchestration shared by the CLI and the acceptance tests.

Each pipeline seed collects its own datasets, trains its own reward
models and dynamics, and evaluates every reward against the ground truth
under both coverage policies. All randomness comes from labeled child
streams of ``Rng(seed)``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .bouncing_balls import BallWorldConfig, ConstantVelocityDynamics, GroundTruthReward
from .core import Rng
from .datasets import TransitionDataset, collect, split
from .learners import (
    TrainHyper,
    fit_dynamics_lsq,
    fit_dynamics_mlp,
    train_preferences,
    train_regress,
    train_regress_ood,
)
from .metrics import (
    ActionGrid,
    CoverageBatch,
    MetricConfig,
    bootstrap_ci,
    dard_distance,
    distances_to_reference,
    epic_distance,
    pearson_reward_distance,
)
from .reward_zoo import FeasibilityReward, NoisyReward, sample_random_reward, shaped_ground_truth

POLICIES = ("uniform", "expert")
METRICS = ("dard", "dard_learned", "epic", "pearson")
TABLE_ROWS = ("GT", "SHAPED", "FEASIBILITY", "REGRESS", "REGRESS-OOD", "PREF")
METRIC_LABELS = {"dard": "DARD", "dard_learned": "DARD-L", "epic": "EPIC", "pearson": "Pearson"}


@dataclass
class ExperimentConfig:
    env: BallWorldConfig = field(default_factory=BallWorldConfig)
    metric: MetricConfig = field(default_factory=lambda: MetricConfig(n_v=10_000))
    hyper: TrainHyper = field(default_factory=TrainHyper)
    seeds: tuple = (0, 1, 2, 3, 4)
    n_train: int = 50_000
    n_val: int = 12_500
    n_eval: int = 12_500
    train_policy: str = "uniform"
    dynamics: str = "lsq"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.train_policy not in POLICIES:
            raise ValueError(f"train_policy must be one of {POLICIES}")
        if self.dynamics not in ("lsq", "mlp"):
            raise ValueError("dynamics must be 'lsq' or 'mlp'")
        self.seeds = tuple(int(s) for s in self.seeds)

    def to_dict(self):
        d = asdict(self)
        d["env"] = self.env.to_dict()
        d["hyper"] = self.hyper.to_dict()
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        if "env" in d:
            kw["env"] = BallWorldConfig(**d.pop("env"))
        if "metric" in d:
            kw["metric"] = MetricConfig(**d.pop("metric"))
        if "hyper" in d:
            h = dict(d.pop("hyper"))
            if "hidden" in h:
                h["hidden"] = tuple(h["hidden"])
            kw["hyper"] = TrainHyper(**h)
        if "seeds" in d:
            kw["seeds"] = tuple(d.pop("seeds"))
        return cls(**kw, **d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def reduced_config(**overrides) -> ExperimentConfig:
    """A small configuration that runs the whole pipeline in seconds."""
    cfg = ExperimentConfig(
        env=BallWorldConfig(arena=8.0, horizon=100, goal_threshold=1.5),
        metric=MetricConfig(n_v=1500, n_m=32, grid_per_dim=2),
        hyper=TrainHyper(max_epochs=3, patience=2, pairs_per_epoch=256),
        seeds=(0, 1),
        n_train=1200, n_val=400, n_eval=2000,
    )
    return replace(cfg, **overrides)


# -- one pipeline seed -------------------------------------------------------


def collect_splits(cfg: ExperimentConfig, policy: str, seed: int):
    total = cfg.n_train + cfg.n_val + cfg.n_eval
    ds = collect(cfg.env, policy, total, seed)
    fractions = (cfg.n_train / total, cfg.n_val / total, cfg.n_eval / total)
    return split(ds, fractions, seed)


def train_models(cfg: ExperimentConfig, train: TransitionDataset, val: TransitionDataset, dyn_train, dyn_val, seed):
    """Learned rewards (REGRESS, REGRESS-OOD, PREF) and the learned dynamics."""
    rng = Rng(seed).child("train")
    shaped = shaped_ground_truth(cfg.env, cfg.metric.gamma)
    models = [
        train_regress(train, val, shaped, cfg.hyper, rng.child("regress"), cfg.env),
        train_regress_ood(train, val, shaped, cfg.hyper, rng.child("regress-ood"), cfg.env),
        train_preferences(train, val, replace(cfg.hyper, gamma=cfg.metric.gamma), rng.child("pref"), cfg.env),
    ]
    if cfg.dynamics == "lsq":
        dyn = fit_dynamics_lsq(dyn_train, cfg.env)
    else:
        dyn = fit_dynamics_mlp(dyn_train, dyn_val, cfg.env, replace(cfg.hyper, lr=5e-4), rng.child("dynamics"))
    return models, dyn


def hand_designed(cfg: ExperimentConfig):
    gt = GroundTruthReward(cfg.env)
    shaped = shaped_ground_truth(cfg.env, cfg.metric.gamma)
    return [gt, shaped, FeasibilityReward(shaped, cfg.env)]


def run_seed(cfg: ExperimentConfig, seed: int, log=None) -> dict:
    """``{policy: {reward: {metric: distance to GT}}}`` for one pipeline seed."""
    say = log or (lambda msg: None)
    data = {p: collect_splits(cfg, p, seed) for p in POLICIES}
    say(f"seed {seed}: collected " + ", ".join(f"{p} {len(data[p][0])}/{len(data[p][1])}/{len(data[p][2])}" for p in POLICIES))
    train, val, _ = data[cfg.train_policy]
    u_train, u_val, _ = data["uniform"]
    learned, dyn = train_models(cfg, train, val, u_train, u_val, seed)
    say(f"seed {seed}: trained " + ", ".join(f"{m.name} ({m.manifest['epochs']} epochs)" for m in learned))

    rewards = hand_designed(cfg) + learned
    grid = ActionGrid.linspace(cfg.env.action_bounds, cfg.metric.grid_per_dim)
    true_dyn = ConstantVelocityDynamics(cfg.env)
    out = {}
    for policy in POLICIES:
        ev = data[policy][2]
        rng = Rng(seed).child(f"evaluate/{policy}")
        batch = CoverageBatch.sample(ev.s, ev.a, ev.s_next, min(cfg.metric.n_v, len(ev)), rng.child("batch"))
        dist = distances_to_reference(rewards[0], rewards, batch, cfg.metric, rng.child("metric"),
                                      dynamics=true_dyn, grid=grid, learned_dynamics=dyn)
        out[policy] = {r.name: dist[r.name] for r in rewards}
        if dist["_degenerate"]:
            say(f"seed {seed}: degenerate under {policy}: {', '.join(dist['_degenerate'])}")
    return out


def _run_seed_job(args):
    cfg_dict, seed = args
    return seed, run_seed(ExperimentConfig.from_dict(cfg_dict), seed)


def run_table1(cfg: ExperimentConfig, threads: int = 1, log=None) -> dict:
    """Per-seed results for every seed in ``cfg``, keyed and ordered by seed."""
    if threads > 1 and len(cfg.seeds) > 1:
        from multiprocessing import get_context

        with get_context("fork").Pool(min(threads, len(cfg.seeds))) as pool:
            done = pool.map(_run_seed_job, [(cfg.to_dict(), s) for s in cfg.seeds])
        results = dict(done)
    else:
        results = {s: run_seed(cfg, s, log) for s in cfg.seeds}
    return {s: results[s] for s in sorted(results)}


# -- aggregation and formatting ---------------------------------------------


def mean_and_se(values):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


def aggregate(per_seed: dict, rows=TABLE_ROWS, policies=POLICIES, metrics=METRICS) -> dict:
    """``{(row, policy, metric): (mean, se)}`` over all seeds."""
    out = {}
    for row in rows:
        for p in policies:
            for m in metrics:
                out[row, p, m] = mean_and_se([per_seed[s][p][row][m] for s in per_seed])
    return out


def fmt1000(x):
    return "nan" if not np.isfinite(x) else f"{1000.0 * x:.2f}"


def table1_csv(agg: dict, rows=TABLE_ROWS) -> str:
    cols = [(p, m) for p in POLICIES for m in METRICS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["reward"] + [f"d_{m}_{p}_x1000" for p, m in cols] + [f"se_{m}_{p}_x1000" for p, m in cols])
    for row in rows:
        w.writerow([row] + [fmt1000(agg[row, p, m][0]) for p, m in cols]
                   + [fmt1000(agg[row, p, m][1]) for p, m in cols])
    return buf.getvalue()


def table1_markdown(agg: dict, n_seeds: int, rows=TABLE_ROWS) -> str:
    cols = [(p, m) for p in POLICIES for m in METRICS]
    head = ["Reward"] + [f"{METRIC_LABELS[m]} ({p})" for p, m in cols]
    lines = [
        f"Distances to GT x1000, mean ± standard error over {n_seeds} seeds.",
        "",
        "| " + " | ".join(head) + " |",
        "|" + "---|" * len(head),
    ]
    for row in rows:
        cells = [f"{fmt1000(agg[row, p, m][0])} ± {fmt1000(agg[row, p, m][1])}" for p, m in cols]
        lines.append("| " + " | ".join([row] + cells) + " |")
    return "\n".join(lines) + "\n"


def per_seed_csv(per_seed: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "policy", "reward", "metric", "distance"])
    for s, res in per_seed.items():
        for p, rows in res.items():
            for r, vals in rows.items():
                for m in METRICS:
                    w.writerow([s, p, r, m, repr(float(vals[m]))])
    return buf.getvalue()


# -- compare, noise sweep, random rewards -------------------------------------


def compare(dataset: TransitionDataset, rewards, seeds, metric: MetricConfig, reference=None,
            learned_dynamics=None):
    """Distances from ``reference`` (GT by default) averaged over ``seeds``.

    Each seed draws its own evaluation batch and metric samples. Returns
    ``(rows, degenerate)`` where ``rows[name][metric] = (mean, se)``.
    """
    cfg = dataset.config
    reference = reference or GroundTruthReward(cfg)
    grid = ActionGrid.linspace(cfg.action_bounds, metric.grid_per_dim)
    dyn = ConstantVelocityDynamics(cfg)
    per_seed, degenerate = [], set()
    for seed in seeds:
        rng = Rng(seed).child("compare")
        batch = CoverageBatch.sample(dataset.s, dataset.a, dataset.s_next, min(metric.n_v, len(dataset)),
                                     rng.child("batch"))
        d = distances_to_reference(reference, rewards, batch, metric, rng.child("metric"),
                                   dynamics=dyn, grid=grid, learned_dynamics=learned_dynamics)
        degenerate.update(d.pop("_degenerate"))
        per_seed.append(d)
    keys = [m for m in METRICS if m != "dard_learned" or learned_dynamics is not None]
    rows = {}
    for r in rewards:
        rows[r.name] = {m: mean_and_se([d[r.name][m] for d in per_seed]) for m in keys}
        if learned_dynamics is None:
            rows[r.name]["dard_learned"] = (float("nan"), float("nan"))
    return rows, sorted(degenerate)


def compare_csv(rows: dict, degenerate=()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["reward_name", "d_dard_x1000", "d_dard_learned_x1000", "d_epic_x1000", "d_pearson_x1000",
                "se_dard_x1000", "se_dard_learned_x1000", "se_epic_x1000", "se_pearson_x1000", "degenerate"])
    for name, vals in rows.items():
        w.writerow([name] + [fmt1000(vals[m][0]) for m in METRICS] + [fmt1000(vals[m][1]) for m in METRICS]
                   + [int(name in degenerate)])
    return buf.getvalue()


def _metric_fn(which, reward, reference, metric, grid, dyn):
    def fn(batch, rng):
        if which == "epic":
            return epic_distance(reference, reward, batch, metric, rng)
        if which == "dard":
            return dard_distance(reference, reward, dyn, batch, grid, metric, rng)
        return pearson_reward_distance(reference, reward, batch)
    return fn


def noise_sweep(dataset: TransitionDataset, sigmas, sizes, k, seed, metric: MetricConfig,
                metrics=("dard", "epic", "pearson")):
    """Bootstrap mean and CI width of D(GT, GT + sigma * noise) for each sigma and sample size."""
    cfg = dataset.config
    gt = GroundTruthReward(cfg)
    grid = ActionGrid.linspace(cfg.action_bounds, metric.grid_per_dim)
    dyn = ConstantVelocityDynamics(cfg)
    population = CoverageBatch(dataset.s, dataset.a, dataset.s_next, dataset.s, dataset.a)
    rows = []
    for sigma in sigmas:
        noisy = NoisyReward(gt, sigma)
        for n in sizes:
            for which in metrics:
                if sigma == 0:
                    rows.append((sigma, n, which, 0.0, 0.0, 0.0, 0.0))
                    continue
                rng = Rng(seed).child(f"sweep/{sigma!r}/{n}/{which}")
                res = bootstrap_ci(_metric_fn(which, noisy, gt, metric, grid, dyn), population, n, k, rng=rng)
                rows.append((sigma, n, which, res.mean, res.lo, res.hi, res.width))
    return rows


def noise_sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sigma", "n", "metric", "mean_x1000", "ci_lo_x1000", "ci_hi_x1000", "ci_width_x1000"])
    for sigma, n, which, mean, lo, hi, width in rows:
        w.writerow([f"{sigma:g}", n, which, fmt1000(mean), fmt1000(lo), fmt1000(hi), fmt1000(width)])
    return buf.getvalue()


def random_rewards(datasets: dict, n_rewards, seed, metric: MetricConfig):
    """D_DARD(GT, R) for ``n_rewards`` sampled linear rewards under each coverage dataset.

    The return proxy is the mean ground-truth reward on the expert
    dataset; it does not depend on the sampled reward.
    """
    any_ds = next(iter(datasets.values()))
    cfg = any_ds.config
    rng = Rng(seed).child("random-rewards")
    rewards = [sample_random_reward(rng.child(f"reward/{i}"), cfg, name=f"R{i:03d}") for i in range(n_rewards)]
    grid = ActionGrid.linspace(cfg.action_bounds, metric.grid_per_dim)
    dyn = ConstantVelocityDynamics(cfg)
    dists = {}
    for policy, ds in datasets.items():
        prng = rng.child(f"evaluate/{policy}")
        batch = CoverageBatch.sample(ds.s, ds.a, ds.s_next, min(metric.n_v, len(ds)), prng.child("batch"))
        d = distances_to_reference(GroundTruthReward(cfg), rewards, batch, metric, prng.child("metric"),
                                   dynamics=dyn, grid=grid, epic=False)
        dists[policy] = {r.name: d[r.name]["dard"] for r in rewards}
    proxy = float(np.mean(datasets["expert"].r_gt)) if "expert" in datasets else float("nan")
    rows = []
    for r in rewards:
        rows.append({"name": r.name, "w_dist": r.w_dist, "w_act": r.w_act, "w_goal": r.w_goal,
                     "goal_sign": int(np.sign(r.w_goal)),
                     **{f"d_dard_{p}": dists[p][r.name] for p in datasets}, "return_proxy": proxy})
    return rows


def random_rewards_csv(rows) -> str:
    buf = io.StringIO()
    keys = list(rows[0].keys())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([k + "_x1000" if k.startswith("d_") else k for k in keys])
    for row in rows:
        out = []
        for k in keys:
            v = row[k]
            if k.startswith("d_"):
                out.append(fmt1000(v))
            elif isinstance(v, float):
                out.append(f"{v:.6f}")
            else:
                out.append(v)
        w.writerow(out)
    return buf.getvalue()

