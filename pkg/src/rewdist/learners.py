"""Small numpy MLPs and the reward / dynamics fitting procedures.

Backprop is hand-written; :func:`grad_check` compares it to central
differences.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bouncing_balls import (
    BallWorldConfig,
    ball_slice,
    check_schema,
    goal_distance,
    positions,
    reflect,
    velocities,
)
from .core import (
    DEFAULT_GAMMA,
    DivergenceDetected,
    DynamicsModel,
    RewardFunction,
    Rng,
    SingularSystem,
    as_generator,
)

# -- network and optimizer --------------------------------------------------


class Mlp:
    """Fully connected network with a flat parameter vector.

    Parameters are laid out layer by layer as ``W`` (row-major,
    ``[fan_in, fan_out]``) followed by ``b``.
    """

    def __init__(self, sizes, activation="tanh"):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = [int(x) for x in sizes]
        self.activation = activation
        self.shapes = list(zip(self.sizes[:-1], self.sizes[1:]))
        self.n_params = sum(i * o + o for i, o in self.shapes)

    def init_params(self, rng) -> np.ndarray:
        rng = as_generator(rng)
        chunks = []
        for i, o in self.shapes:
            limit = np.sqrt(6.0 / (i + o))
            chunks.append(rng.uniform(-limit, limit, size=i * o))
            chunks.append(np.zeros(o))
        return np.concatenate(chunks)

    def unpack(self, params):
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        layers, k = [], 0
        for i, o in self.shapes:
            W = params[k:k + i * o].reshape(i, o)
            k += i * o
            b = params[k:k + o]
            k += o
            layers.append((W, b))
        return layers

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def forward(self, params, X, cache=False):
        layers = self.unpack(params)
        h = X
        hs = [X]
        for n, (W, b) in enumerate(layers):
            h = h @ W + b
            if n < len(layers) - 1:
                h = self._act(h)
            hs.append(h)
        return (h, hs) if cache else h

    def backward(self, params, hs, dout) -> np.ndarray:
        """Gradient of ``sum(dout * output)`` with respect to the parameters."""
        layers = self.unpack(params)
        grads = []
        delta = dout
        for n in range(len(layers) - 1, -1, -1):
            W, _ = layers[n]
            grads.append((hs[n].T @ delta, delta.sum(axis=0)))
            if n > 0:
                delta = delta @ W.T
                h = hs[n]
                delta = delta * (1.0 - h * h) if self.activation == "tanh" else delta * (h > 0)
        flat = []
        for gW, gb in reversed(grads):
            flat.append(gW.reshape(-1))
            flat.append(gb)
        return np.concatenate(flat)


class Adam:
    def __init__(self, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, grad_clip=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.grad_clip = grad_clip
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params, grad):
        if self.grad_clip is not None:
            norm = np.linalg.norm(grad)
            if norm > self.grad_clip:
                grad = grad * (self.grad_clip / norm)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def mse_loss(mlp: Mlp, params, X, y):
    """Mean squared error and its gradient. ``y`` has shape ``[N, out]``."""
    out, hs = mlp.forward(params, X, cache=True)
    err = out - y
    loss = float(np.mean(err * err))
    grad = mlp.backward(params, hs, 2.0 * err / err.size)
    return loss, grad


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def preference_loss(mlp: Mlp, params, X1, X2, y, reg=0.01):
    """Bradley-Terry cross-entropy plus ``reg * mean(r**2)``.

    ``X1``, ``X2`` are ``[B, L, F]`` segment features; ``y`` is the
    probability that segment 1 is preferred.
    """
    B, L, F = X1.shape
    X = np.concatenate([X1.reshape(-1, F), X2.reshape(-1, F)])
    out, hs = mlp.forward(params, X, cache=True)
    r = out[:, 0]
    z = r[:B * L].reshape(B, L).sum(axis=1) - r[B * L:].reshape(B, L).sum(axis=1)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + reg * np.mean(r * r))
    dz = (_sigmoid(z) - y) / B
    dr = np.concatenate([np.repeat(dz, L), np.repeat(-dz, L)]) + 2.0 * reg * r / r.size
    return loss, mlp.backward(params, hs, dr[:, None])


def grad_check(loss_fn, params, epsilon=1e-5, n_check=64, rng=0) -> float:
    """Max relative error between the analytic and central-difference gradients.

    ``loss_fn(params) -> (loss, grad)``. Checks ``n_check`` randomly chosen
    parameters (all of them if there are fewer).
    """
    params = np.array(params, dtype=np.float64)
    _, grad = loss_fn(params)
    n = params.size
    idx = np.arange(n) if n <= n_check else as_generator(rng).choice(n, size=n_check, replace=False)
    worst = 0.0
    for i in idx:
        old = params[i]
        params[i] = old + epsilon
        up, _ = loss_fn(params)
        params[i] = old - epsilon
        down, _ = loss_fn(params)
        params[i] = old
        num = (up - down) / (2 * epsilon)
        denom = max(abs(num) + abs(grad[i]), 1e-8)
        worst = max(worst, abs(num - grad[i]) / denom)
    return worst


# -- features and learned rewards -------------------------------------------


class FeatureExtractor:
    """Hand-built transition features, standardized with stored statistics.

    Columns: goal distance in s and s', their difference, goal reached in
    s', squared displacement of each other ball, and the action.
    """

    def __init__(self, config: BallWorldConfig | None = None, mean=None, std=None):
        self.config = config or BallWorldConfig()
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)

    @property
    def n_features(self):
        return 4 + (self.config.n_balls - 1) + self.config.action_dim

    def raw(self, s, a, s_next):
        cfg = self.config
        check_schema(s, cfg)
        check_schema(s_next, cfg)
        d0 = goal_distance(s)
        d1 = goal_distance(s_next)
        reached = (d1 <= cfg.goal_threshold).astype(np.float64)
        moved = positions(s_next, cfg)[:, 1:] - positions(s, cfg)[:, 1:]
        sq = np.sum(moved * moved, axis=2)
        return np.column_stack([d0, d1, d1 - d0, reached, sq, a])

    def fit(self, s, a, s_next) -> "FeatureExtractor":
        X = self.raw(s, a, s_next)
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.std = np.where(std > 1e-12, std, 1.0)
        return self

    def __call__(self, s, a, s_next):
        if self.mean is None:
            raise RuntimeError("feature statistics not fitted")
        return (self.raw(s, a, s_next) - self.mean) / self.std


class LearnedReward(RewardFunction):
    def __init__(self, features: FeatureExtractor, mlp: Mlp, params, name="learned", manifest=None):
        self.features = features
        self.mlp = mlp
        self.params = np.asarray(params, dtype=np.float64)
        self.name = name
        self.manifest = manifest or {}

    def evaluate(self, s, a, s_next):
        return self.mlp.forward(self.params, self.features(s, a, s_next))[:, 0]

    def to_dict(self):
        return {
            "kind": "reward_mlp",
            "name": self.name,
            "config": self.features.config.to_dict(),
            "sizes": self.mlp.sizes,
            "activation": self.mlp.activation,
            "feature_mean": self.features.mean.tolist(),
            "feature_std": self.features.std.tolist(),
            "params": self.params.tolist(),
            "manifest": self.manifest,
        }

    @classmethod
    def from_dict(cls, d):
        feats = FeatureExtractor(BallWorldConfig(**d["config"]), d["feature_mean"], d["feature_std"])
        return cls(feats, Mlp(d["sizes"], d["activation"]), d["params"], d["name"], d.get("manifest"))


@dataclass
class TrainHyper:
    hidden: tuple = (32, 32)
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 15
    grad_clip: float = 1.0
    n_random_pairs: int = 10
    segment_len: int = 25
    reward_reg: float = 0.01
    pairs_per_epoch: int = 4096
    gamma: float = DEFAULT_GAMMA

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _fit(mlp, params, batch_loss, val_loss, n_items, hyper: TrainHyper, rng, batch_size=None, new_epoch=None):
    """Minibatch Adam with early stopping; returns the best-validation parameters."""
    opt = Adam(mlp.n_params, hyper.lr, grad_clip=hyper.grad_clip)
    batch_size = batch_size or hyper.batch_size
    best, best_params, stale = val_loss(params), params.copy(), 0
    history = [best]
    for _ in range(hyper.max_epochs):
        if new_epoch is not None:
            new_epoch()
        order = rng.permutation(n_items)
        for start in range(0, n_items, batch_size):
            loss, grad = batch_loss(params, order[start:start + batch_size])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceDetected("training loss became non-finite")
            params = opt.step(params, grad)
        v = val_loss(params)
        if not np.isfinite(v):
            raise DivergenceDetected("validation loss became non-finite")
        history.append(v)
        if v < best - 1e-12:
            best, best_params, stale = v, params.copy(), 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    return best_params, history


def _data_hash(*arrays):
    h = hashlib.sha256()
    for x in arrays:
        h.update(np.ascontiguousarray(x).tobytes())
    return h.hexdigest()[:16]


def _streams(rng):
    return rng if isinstance(rng, Rng) else Rng(rng)


def _regress(train_sas, y_train, val_sas, y_val, hyper, rng, config, name, extra):
    rng = rng.child("fit").generator
    feats = FeatureExtractor(config).fit(*train_sas)
    X, Xv = feats(*train_sas), feats(*val_sas)
    y, yv = y_train[:, None], y_val[:, None]
    mlp = Mlp([feats.n_features, *hyper.hidden, 1], "tanh")
    params = mlp.init_params(rng)
    params, history = _fit(
        mlp, params,
        lambda p, idx: mse_loss(mlp, p, X[idx], y[idx]),
        lambda p: mse_loss(mlp, p, Xv, yv)[0],
        len(X), hyper, rng,
    )
    manifest = {"method": name, "hyper": hyper.to_dict(), "epochs": len(history) - 1,
                "val_loss": min(history), "data_hash": _data_hash(X, y), **extra}
    return LearnedReward(feats, mlp, params, name, manifest)


def _sas(d):
    return d.s, d.a, d.s_next


def train_regress(train, val, target: RewardFunction, hyper: TrainHyper | None = None, rng=0,
                  config: BallWorldConfig | None = None) -> LearnedReward:
    """MSE regression of ``target`` on the training transitions."""
    hyper = hyper or TrainHyper()
    return _regress(_sas(train), target(*_sas(train)), _sas(val), target(*_sas(val)),
                    hyper, _streams(rng), config, "REGRESS", {"target": target.name})


def _recombine(s, a, s_next, n_pairs, rng):
    """Originals followed by ``n_pairs`` rows per record pairing its s with a random (a, s')."""
    if n_pairs == 0:
        return s, a, s_next
    n = len(s)
    j = rng.integers(0, n, size=n * n_pairs)
    rep = np.tile(np.arange(n), n_pairs)
    return (np.concatenate([s, s[rep]]), np.concatenate([a, a[j]]), np.concatenate([s_next, s_next[j]]))


def train_regress_ood(train, val, target: RewardFunction, hyper: TrainHyper | None = None, rng=0,
                      config: BallWorldConfig | None = None) -> LearnedReward:
    """Regression on transitions whose (a, s') are reshuffled across records.

    Matches the product distribution that EPIC evaluates on. The
    recombination uses its own stream, so ``n_random_pairs = 0`` trains
    exactly like :func:`train_regress`.
    """
    hyper = hyper or TrainHyper()
    rng = _streams(rng)
    mix = rng.child("pairs").generator
    tr = _recombine(*_sas(train), hyper.n_random_pairs, mix)
    va = _recombine(*_sas(val), hyper.n_random_pairs, mix)
    return _regress(tr, target(*tr), va, target(*va), hyper, rng, config, "REGRESS-OOD",
                    {"target": target.name, "n_random_pairs": hyper.n_random_pairs})


def segments(dataset, length):
    """Non-overlapping contiguous windows inside episodes, as ``[n_seg, length]`` indices."""
    out = []
    for idx in dataset.episodes():
        idx = idx[np.argsort(dataset.t[idx], kind="stable")]
        for k in range(len(idx) // length):
            out.append(idx[k * length:(k + 1) * length])
    if not out:
        raise ValueError(f"no episode has {length} or more steps")
    return np.array(out)


def preference_labels(ret1, ret2):
    return np.where(ret1 > ret2, 1.0, np.where(ret1 < ret2, 0.0, 0.5))


def _segment_returns(dataset, segs, gamma):
    disc = gamma ** np.arange(segs.shape[1])
    return dataset.r_gt[segs] @ disc


def train_preferences(train, val, hyper: TrainHyper | None = None, rng=0,
                      config: BallWorldConfig | None = None) -> LearnedReward:
    """Bradley-Terry reward learning from synthetic segment comparisons.

    A pair is labeled by which segment has the higher discounted
    ground-truth return (0.5 on ties).
    """
    hyper = hyper or TrainHyper()
    rng = _streams(rng).child("fit").generator
    L = hyper.segment_len
    seg_tr, seg_va = segments(train, L), segments(val, L)
    ret_tr = _segment_returns(train, seg_tr, hyper.gamma)
    ret_va = _segment_returns(val, seg_va, hyper.gamma)
    feats = FeatureExtractor(config).fit(*_sas(train))
    F_tr, F_va = feats(*_sas(train)), feats(*_sas(val))
    mlp = Mlp([feats.n_features, *hyper.hidden, 1], "tanh")
    params = mlp.init_params(rng)

    def draw_pairs(n_seg, n):
        i = rng.integers(0, n_seg, size=n)
        j = (i + rng.integers(1, n_seg, size=n)) % n_seg
        return i, j

    vi, vj = draw_pairs(len(seg_va), min(hyper.pairs_per_epoch, 4 * len(seg_va) ** 2))
    yv = preference_labels(ret_va[vi], ret_va[vj])
    X1v, X2v = F_va[seg_va[vi]], F_va[seg_va[vj]]
    pairs = {}

    def new_epoch():
        # Fresh training pairs every epoch; validation pairs stay fixed.
        pairs["i"], pairs["j"] = draw_pairs(len(seg_tr), hyper.pairs_per_epoch)

    def batch_loss(p, idx):
        i, j = pairs["i"][idx], pairs["j"][idx]
        y = preference_labels(ret_tr[i], ret_tr[j])
        return preference_loss(mlp, p, F_tr[seg_tr[i]], F_tr[seg_tr[j]], y, hyper.reward_reg)

    def val_loss(p):
        return preference_loss(mlp, p, X1v, X2v, yv, hyper.reward_reg)[0]

    params, history = _fit(mlp, params, batch_loss, val_loss, hyper.pairs_per_epoch, hyper, rng,
                           batch_size=max(1, hyper.batch_size // L), new_epoch=new_epoch)
    manifest = {"method": "PREF", "hyper": hyper.to_dict(), "epochs": len(history) - 1,
                "val_loss": min(history), "data_hash": _data_hash(F_tr, ret_tr)}
    return LearnedReward(feats, mlp, params, "PREF", manifest)


def preference_probability(model: RewardFunction, seg1, seg2) -> float:
    """P(seg1 preferred) where each segment is an ``(s, a, s_next)`` tuple of arrays."""
    z = float(np.sum(model(*seg1)) - np.sum(model(*seg2)))
    return float(_sigmoid(z))


# -- dynamics ---------------------------------------------------------------


def _ball_columns(s, a, s_next, cfg: BallWorldConfig):
    """Per-ball inputs and [dp, dv] targets; agent and other balls separately."""
    P, V = positions(s, cfg), velocities(s, cfg)
    P2, V2 = positions(s_next, cfg), velocities(s_next, cfg)
    dP, dV = P2 - P, V2 - V
    agent = (np.column_stack([V[:, 0], a]), np.column_stack([dP[:, 0], dV[:, 0]]))
    n_other = cfg.n_balls - 1
    other = (V[:, 1:].reshape(-1, 2), np.concatenate([dP[:, 1:], dV[:, 1:]], axis=2).reshape(-1, 4))
    # Rows affected by a wall bounce or the speed limit are not linear in the inputs.
    margin = cfg.max_speed * cfg.dt
    near = np.any((P2 < cfg.lo + margin) | (P2 > cfg.hi - margin), axis=2)
    capped = np.linalg.norm(V2, axis=2) >= cfg.max_speed - 1e-9
    clean = ~(near | capped)
    return agent, other, clean[:, 0], clean[:, 1:].reshape(-1), n_other


def _ridge_solve(X, Y, ridge):
    X1 = np.column_stack([X, np.ones(len(X))])
    G = X1.T @ X1 + ridge * np.eye(X1.shape[1])
    if not np.all(np.isfinite(G)) or np.linalg.cond(G) > 1e12:
        raise SingularSystem("least-squares design matrix is rank-deficient")
    return np.linalg.solve(G, X1.T @ Y)


class LinearBallDynamics(DynamicsModel):
    """Per-ball linear model ``[v, (a), 1] -> [dp, dv]`` with wall reflection."""

    is_deterministic = True

    def __init__(self, config: BallWorldConfig, agent_coef, other_coef):
        self.config = config
        self.agent_coef = np.asarray(agent_coef, dtype=np.float64)   # [5, 4]
        self.other_coef = np.asarray(other_coef, dtype=np.float64)   # [3, 4]

    def _deltas(self, s, a):
        cfg = self.config
        V = velocities(s, cfg)
        n = len(s)
        ag = np.column_stack([V[:, 0], a, np.ones(n)]) @ self.agent_coef
        ot = np.concatenate([V[:, 1:], np.ones((n, cfg.n_balls - 1, 1))], axis=2) @ self.other_coef
        return np.concatenate([ag[:, None], ot], axis=1)                # [n, balls, 4]

    def sample(self, s, a, rng=None):
        cfg = self.config
        check_schema(s, cfg)
        d = self._deltas(s, a)
        pos, vel = reflect(positions(s, cfg) + d[..., :2], velocities(s, cfg) + d[..., 2:], cfg.lo, cfg.hi)
        out = s.copy()
        for k in range(cfg.n_balls):
            sl = ball_slice(k)
            out[:, sl] = np.concatenate([pos[:, k], vel[:, k]], axis=1)
        return out

    def to_dict(self):
        return {"kind": "dynamics_lsq", "config": self.config.to_dict(),
                "agent_coef": self.agent_coef.tolist(), "other_coef": self.other_coef.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(BallWorldConfig(**d["config"]), d["agent_coef"], d["other_coef"])


def fit_dynamics_lsq(dataset, config: BallWorldConfig | None = None, ridge=1e-8) -> LinearBallDynamics:
    cfg = config or getattr(dataset, "config", None) or BallWorldConfig()
    check_schema(dataset.s, cfg)
    (Xa, Ya), (Xo, Yo), ca, co, _ = _ball_columns(dataset.s, dataset.a, dataset.s_next, cfg)
    return LinearBallDynamics(cfg, _ridge_solve(Xa[ca], Ya[ca], ridge), _ridge_solve(Xo[co], Yo[co], ridge))


class MlpBallDynamics(LinearBallDynamics):
    """Per-ball MLPs predicting [dp, dv]; the agent's network also sees the action."""

    def __init__(self, config, agent_net: Mlp, agent_params, other_net: Mlp, other_params):
        self.config = config
        self.agent_net, self.agent_params = agent_net, np.asarray(agent_params, dtype=np.float64)
        self.other_net, self.other_params = other_net, np.asarray(other_params, dtype=np.float64)

    def _deltas(self, s, a):
        cfg = self.config
        V = velocities(s, cfg)
        ag = self.agent_net.forward(self.agent_params, np.column_stack([V[:, 0], a]))
        ot = self.other_net.forward(self.other_params, V[:, 1:].reshape(-1, 2)).reshape(len(s), -1, 4)
        return np.concatenate([ag[:, None], ot], axis=1)

    def to_dict(self):
        return {"kind": "dynamics_mlp", "config": self.config.to_dict(),
                "agent_sizes": self.agent_net.sizes, "agent_params": self.agent_params.tolist(),
                "other_sizes": self.other_net.sizes, "other_params": self.other_params.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(BallWorldConfig(**d["config"]), Mlp(d["agent_sizes"], "relu"), d["agent_params"],
                   Mlp(d["other_sizes"], "relu"), d["other_params"])


def fit_dynamics_mlp(train, val, config: BallWorldConfig | None = None, hyper: TrainHyper | None = None,
                     rng=0) -> MlpBallDynamics:
    """ReLU networks trained with MSE on per-ball state deltas."""
    cfg = config or getattr(train, "config", None) or BallWorldConfig()
    hyper = hyper or TrainHyper(lr=5e-4)
    rng = _streams(rng).child("fit").generator
    (Xa, Ya), (Xo, Yo), ca, co, _ = _ball_columns(train.s, train.a, train.s_next, cfg)
    (Xav, Yav), (Xov, Yov), cav, cov, _ = _ball_columns(val.s, val.a, val.s_next, cfg)
    nets = []
    for X, Y, Xv, Yv in ((Xa[ca], Ya[ca], Xav[cav], Yav[cav]), (Xo[co], Yo[co], Xov[cov], Yov[cov])):
        mlp = Mlp([X.shape[1], *hyper.hidden, 4], "relu")
        p0 = mlp.init_params(rng)
        p, _ = _fit(mlp, p0, lambda p, idx: mse_loss(mlp, p, X[idx], Y[idx]),
                    lambda p: mse_loss(mlp, p, Xv, Yv)[0], len(X), hyper, rng)
        nets.append((mlp, p))
    return MlpBallDynamics(cfg, nets[0][0], nets[0][1], nets[1][0], nets[1][1])


# -- checkpoints ------------------------------------------------------------

_LOADERS = {"reward_mlp": LearnedReward, "dynamics_lsq": LinearBallDynamics, "dynamics_mlp": MlpBallDynamics}


def save_model(model, path):
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n")


def load_model(path):
    d = json.loads(Path(path).read_text())
    try:
        return _LOADERS[d["kind"]].from_dict(d)
    except KeyError:
        raise ValueError(f"{path}: unknown checkpoint kind {d.get('kind')!r}") from None


def load_reward_model(path) -> LearnedReward:
    model = load_model(path)
    if not isinstance(model, LearnedReward):
        raise ValueError(f"{path} does not hold a reward model")
    return model
