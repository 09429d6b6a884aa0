"""Command line entry point: ``rewdist <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 IO, 4 degenerate metric, 5 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets, learners, pipeline
from .bouncing_balls import POLICIES as ENV_POLICIES
from .core import (
    ChecksumMismatch,
    DegenerateVariance,
    DivergenceDetected,
    Rng,
    SchemaVersionMismatch,
)
from .metrics import CoverageBatch, MetricConfig, dard_distance, epic_distance, pearson_reward_distance
from .oracle_mdp import TabularDynamics, TabularMdp, TabularReward, TabularRewardFunction, exact_distance
from .reward_zoo import reward_from_spec

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DEGENERATE, EXIT_DIVERGED = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _positive(kind=int):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _load_config(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.ExperimentConfig.load(args.config) if args.config else pipeline.ExperimentConfig()
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=tuple(args.seeds))
    return cfg


def _metric(args, cfg: pipeline.ExperimentConfig) -> MetricConfig:
    m = cfg.metric
    for key in ("n_v", "n_m", "grid_per_dim", "n_t"):
        val = getattr(args, key, None)
        if val is not None:
            m = replace(m, **{key: val})
    return m


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text)
    print(f"wrote {path}")


def _read_specs(text):
    """Reward specs from a JSON file path or an inline JSON string (object or list)."""
    p = Path(text)
    raw = json.loads(p.read_text()) if p.exists() else json.loads(text)
    return raw if isinstance(raw, list) else [raw]


# -- subcommands ------------------------------------------------------------


def cmd_collect(args):
    if args.env != "bouncing_balls":
        raise UsageError(f"unknown env {args.env!r}")
    cfg = _load_config(args)
    ds = datasets.collect(cfg.env, args.policy, args.steps, args.seed)
    out = Path(args.out)
    datasets.save(ds, out)
    print(f"wrote {out}: {len(ds)} transitions, {ds.n_episodes} episodes")
    return EXIT_OK


def cmd_train_reward(args):
    cfg = _load_config(args)
    train, val = datasets.load(args.train), datasets.load(args.val)
    rng = Rng(args.seed).child(f"train/{args.method}")
    if args.method == "pref":
        model = learners.train_preferences(train, val, replace(cfg.hyper, gamma=cfg.metric.gamma), rng, train.config)
    else:
        target = reward_from_spec(_read_specs(args.target)[0], train.config, cfg.metric.gamma)
        fit = learners.train_regress if args.method == "regress" else learners.train_regress_ood
        model = fit(train, val, target, cfg.hyper, rng, train.config)
    learners.save_model(model, args.out)
    print(f"wrote {args.out}: {model.name}, {model.manifest['epochs']} epochs, val loss {model.manifest['val_loss']:.6g}")
    return EXIT_OK


def cmd_train_dynamics(args):
    cfg = _load_config(args)
    train = datasets.load(args.train)
    if args.model == "lsq":
        model = learners.fit_dynamics_lsq(train, train.config)
    else:
        if not args.val:
            raise UsageError("--val is required for the mlp dynamics model")
        model = learners.fit_dynamics_mlp(train, datasets.load(args.val), train.config,
                                          replace(cfg.hyper, lr=5e-4), Rng(args.seed).child("train/dynamics"))
    learners.save_model(model, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_compare(args):
    cfg = _load_config(args)
    ds = datasets.load(args.dataset)
    rewards = [reward_from_spec(s, ds.config, cfg.metric.gamma) for s in _read_specs(args.rewards)]
    reference = reward_from_spec(_read_specs(args.reference)[0], ds.config, cfg.metric.gamma) if args.reference else None
    dyn = learners.load_model(args.dynamics) if args.dynamics else None
    rows, degenerate = pipeline.compare(ds, rewards, cfg.seeds, _metric(args, cfg), reference, dyn)
    _write(_out_dir(args) / args.name, pipeline.compare_csv(rows, degenerate))
    if degenerate:
        print(f"degenerate metric for: {', '.join(degenerate)}", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_table1(args):
    cfg = _load_config(args)
    cfg = replace(cfg, metric=_metric(args, cfg))
    out = _out_dir(args)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    per_seed = pipeline.run_table1(cfg, threads=args.threads, log=log)
    agg = pipeline.aggregate(per_seed)
    _write(out / "table1.csv", pipeline.table1_csv(agg))
    _write(out / "table1.md", pipeline.table1_markdown(agg, len(cfg.seeds)))
    _write(out / "table1_per_seed.csv", pipeline.per_seed_csv(per_seed))
    _write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    bad = [k for k, v in agg.items() if not np.isfinite(v[0])]
    if bad:
        print(f"{len(bad)} table cells are degenerate", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_noise_sweep(args):
    cfg = _load_config(args)
    ds = datasets.load(args.dataset)
    rows = pipeline.noise_sweep(ds, args.sigmas, args.sizes, args.k, args.seed, _metric(args, cfg))
    _write(_out_dir(args) / "noise_sweep.csv", pipeline.noise_sweep_csv(rows))
    return EXIT_OK


def cmd_random_rewards(args):
    cfg = _load_config(args)
    data = {"uniform": datasets.load(args.uniform)}
    if args.expert:
        data["expert"] = datasets.load(args.expert)
    rows = pipeline.random_rewards(data, args.count, args.seed, _metric(args, cfg))
    _write(_out_dir(args) / "random_rewards.csv", pipeline.random_rewards_csv(rows))
    neg = [r["d_dard_uniform"] for r in rows if r["w_goal"] < 0]
    pos = [r["d_dard_uniform"] for r in rows if r["w_goal"] > 0]
    if neg and pos:
        print(f"median D_DARD (uniform): w_goal<0 {np.median(neg):.4f}, w_goal>0 {np.median(pos):.4f}")
    return EXIT_OK


def cmd_oracle_check(args):
    """Exact vs sampled distances on a random tabular MDP."""
    rng = Rng(args.seed)
    mdp = TabularMdp.random(args.states, args.actions, rng.child("mdp"))
    ra = TabularReward.random(args.states, args.actions, rng.child("ra"))
    rb = ra + 0.7 * TabularReward.random(args.states, args.actions, rng.child("rb"))
    fa, fb = TabularRewardFunction(ra, "A"), TabularRewardFunction(rb, "B")
    n = args.n
    s, a, s2 = mdp.sample_transitions(n, rng.child("batch"))
    batch = CoverageBatch(s, a, s2, s, a)
    mcfg = MetricConfig(n_v=n, n_m=n, grid_per_dim=args.actions, n_t=8, gamma=mdp.gamma)
    grid = mdp.action_grid()
    dyn = TabularDynamics(mdp)
    sampled = {
        "epic": epic_distance(fa, fb, batch, mcfg, rng.child("epic")),
        "dard": dard_distance(fa, fb, dyn, batch, grid, mcfg, rng.child("dard")),
        "pearson": pearson_reward_distance(fa, fb, batch),
    }
    print("metric,exact,sampled")
    for which in ("epic", "dard", "pearson"):
        print(f"{which},{exact_distance(ra, rb, which, mdp):.6f},{sampled[which]:.6f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--out-dir", default="runs", help="directory for CSV / markdown outputs")
    common.add_argument("--threads", type=_positive(), default=1, help="worker processes for per-seed runs")

    seeds = argparse.ArgumentParser(add_help=False)
    seeds.add_argument("--seeds", type=int, nargs="+", help="pipeline seeds (default from config: 0..4)")

    seed = argparse.ArgumentParser(add_help=False)
    seed.add_argument("--seed", type=int, default=0)

    metric = argparse.ArgumentParser(add_help=False)
    metric.add_argument("--n-v", dest="n_v", type=_positive())
    metric.add_argument("--n-m", dest="n_m", type=_positive())
    metric.add_argument("--grid", dest="grid_per_dim", type=_positive(), help="actions per axis of the grid")
    metric.add_argument("--n-t", dest="n_t", type=_positive())

    p = argparse.ArgumentParser(prog="rewdist", description="Reward function distances on Bouncing Balls.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", parents=[common, seed], help="collect a dataset")
    c.add_argument("--env", default="bouncing_balls")
    c.add_argument("--policy", choices=ENV_POLICIES, default="uniform")
    c.add_argument("--steps", type=_positive(), required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect)

    c = sub.add_parser("train-reward", parents=[common, seed], help="train REGRESS / REGRESS-OOD / PREF")
    c.add_argument("--method", choices=("regress", "regress-ood", "pref"), required=True)
    c.add_argument("--train", required=True)
    c.add_argument("--val", required=True)
    c.add_argument("--target", default='{"kind": "shaped"}', help="reward spec (JSON or file) for regression")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_train_reward)

    c = sub.add_parser("train-dynamics", parents=[common, seed], help="fit a dynamics model for DARD-L")
    c.add_argument("--model", choices=("lsq", "mlp"), default="lsq")
    c.add_argument("--train", required=True)
    c.add_argument("--val")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_train_dynamics)

    c = sub.add_parser("compare", parents=[common, seeds, metric], help="distances from GT to reward specs")
    c.add_argument("--dataset", required=True)
    c.add_argument("--rewards", required=True, help="JSON list of reward specs, or a file holding one")
    c.add_argument("--reference", help="reference reward spec (default: ground truth)")
    c.add_argument("--dynamics", help="learned dynamics checkpoint for DARD-L")
    c.add_argument("--name", default="compare.csv")
    c.set_defaults(func=cmd_compare)

    c = sub.add_parser("table1", parents=[common, seeds, metric], help="full pipeline: distances to GT for every reward, metric and coverage policy")
    c.add_argument("--verbose", action="store_true")
    c.set_defaults(func=cmd_table1)

    c = sub.add_parser("noise-sweep", parents=[common, seed, metric], help="distance and CI width vs noise")
    c.add_argument("--dataset", required=True)
    c.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.1, 0.3, 1.0, 3.0])
    c.add_argument("--sizes", type=_positive(), nargs="+", default=[1024, 4096])
    c.add_argument("--k", type=_positive(), default=10, help="sub-datasets per bootstrap interval")
    c.set_defaults(func=cmd_noise_sweep)

    c = sub.add_parser("random-rewards", parents=[common, seed, metric], help="D_DARD over sampled linear rewards")
    c.add_argument("--uniform", required=True, help="uniform-policy evaluation dataset")
    c.add_argument("--expert", help="expert-policy evaluation dataset")
    c.add_argument("--count", type=_positive(), default=128)
    c.set_defaults(func=cmd_random_rewards)

    c = sub.add_parser("oracle-check", parents=[common, seed], help="exact vs sampled distances on a tabular MDP")
    c.add_argument("--states", type=_positive(), default=5)
    c.add_argument("--actions", type=_positive(), default=3)
    c.add_argument("--n", type=_positive(), default=4096)
    c.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (OSError, ChecksumMismatch, SchemaVersionMismatch, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except DegenerateVariance as e:
        print(f"degenerate: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    except DivergenceDetected as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
