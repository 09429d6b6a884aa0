"""Rollout collection, episode-level splits and ``.rjsonl`` dataset files.

File layout: one JSON manifest line, one JSON line per transition, then a
final line holding the CRC-64 (hex) of every preceding byte.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import crcmod.predefined
import numpy as np

from .bouncing_balls import SCHEMA_ID, BallWorldConfig, rollout_episodes
from .core import (
    ActionVec,
    ChecksumMismatch,
    InsufficientEpisodes,
    Rng,
    SchemaVersionMismatch,
    StateVec,
    Transition,
    TransitionBatch,
)

SCHEMA_VERSION = 1
ENV_NAME = "bouncing_balls"

_crc64 = crcmod.predefined.mkCrcFun("crc-64-we")


def config_hash(config: BallWorldConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TransitionDataset:
    """Transitions stored column-wise, plus a manifest describing them."""

    manifest: dict
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r_gt: np.ndarray
    episode: np.ndarray
    t: np.ndarray
    done: np.ndarray
    config: BallWorldConfig = field(default_factory=BallWorldConfig)

    def __post_init__(self):
        n = len(self.s)
        cols = (self.a, self.s_next, self.r_gt, self.episode, self.t, self.done)
        if any(len(c) != n for c in cols):
            raise ValueError("dataset columns have different lengths")
        if self.manifest.get("n_transitions") != n:
            raise ValueError("manifest transition count does not match contents")

    def __len__(self):
        return len(self.s)

    def __eq__(self, other):
        if not isinstance(other, TransitionDataset):
            return NotImplemented
        names = ("s", "a", "s_next", "r_gt", "episode", "t", "done")
        return self.manifest == other.manifest and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in names
        )

    @property
    def n_episodes(self):
        return len(np.unique(self.episode))

    def batch(self) -> TransitionBatch:
        return TransitionBatch(self.s, self.a, self.s_next, {"policy": self.manifest.get("policy")})

    def take(self, idx, **manifest_updates) -> "TransitionDataset":
        idx = np.asarray(idx)
        manifest = dict(self.manifest)
        manifest.update(manifest_updates)
        ep = self.episode[idx]
        manifest["n_transitions"] = int(len(ep))
        manifest["n_episodes"] = int(len(np.unique(ep)))
        return TransitionDataset(
            manifest, self.s[idx], self.a[idx], self.s_next[idx], self.r_gt[idx],
            ep, self.t[idx], self.done[idx], self.config,
        )

    def transitions(self):
        """Iterate as :class:`Transition` objects (slow; for inspection)."""
        bounds = self.config.action_bounds
        for i in range(len(self)):
            yield Transition(
                StateVec(self.s[i], SCHEMA_ID), ActionVec(self.a[i], bounds), StateVec(self.s_next[i], SCHEMA_ID),
                int(self.episode[i]), int(self.t[i]), float(self.r_gt[i]), bool(self.done[i]),
            )

    def episodes(self):
        """Yield index arrays, one per episode, in order of first appearance."""
        _, first = np.unique(self.episode, return_index=True)
        for e in self.episode[np.sort(first)]:
            yield np.flatnonzero(self.episode == e)


def collect(config: BallWorldConfig | None, policy: str, n_steps: int, seed: int) -> TransitionDataset:
    """``n_steps`` transitions from seeded episodes of ``policy``, episode-major."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    cfg = config or BallWorldConfig()
    H = cfg.horizon
    n_ep = math.ceil(n_steps / H)
    S, A, S2, R = rollout_episodes(cfg, policy, n_ep, Rng(seed).child(f"collect/{policy}"))
    flat = lambda x: x.reshape((n_ep * H,) + x.shape[2:])[:n_steps]
    ep = np.repeat(np.arange(n_ep), H)[:n_steps]
    t = np.tile(np.arange(H), n_ep)[:n_steps]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "env": ENV_NAME,
        "schema_id": SCHEMA_ID,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "policy": policy,
        "seed": int(seed),
        "n_transitions": int(n_steps),
        "n_episodes": int(len(np.unique(ep))),
    }
    return TransitionDataset(manifest, flat(S), flat(A), flat(S2), flat(R), ep, t, t == H - 1, cfg)


def save(dataset: TransitionDataset, path) -> None:
    lines = [json.dumps(dataset.manifest, sort_keys=True)]
    s, a, s2 = dataset.s.tolist(), dataset.a.tolist(), dataset.s_next.tolist()
    r, ep, t, done = dataset.r_gt.tolist(), dataset.episode.tolist(), dataset.t.tolist(), dataset.done.tolist()
    for i in range(len(dataset)):
        rec = {"s": s[i], "a": a[i], "s_next": s2[i], "r_gt": r[i], "episode": ep[i], "t": t[i], "done": done[i]}
        lines.append(json.dumps(rec))
    body = ("\n".join(lines) + "\n").encode()
    Path(path).write_bytes(body + f"{_crc64(body):016x}\n".encode())


def load(path) -> TransitionDataset:
    raw = Path(path).read_bytes()
    body, sep, tail = raw.rstrip(b"\n").rpartition(b"\n")
    if not sep:
        raise ChecksumMismatch(f"{path}: missing checksum line")
    body += b"\n"
    try:
        expected = int(tail.decode(), 16)
    except ValueError:
        raise ChecksumMismatch(f"{path}: malformed checksum line") from None
    if _crc64(body) != expected:
        raise ChecksumMismatch(f"{path}: checksum does not match contents")

    lines = body.decode().splitlines()
    manifest = json.loads(lines[0])
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"{path}: schema version {manifest.get('schema_version')!r}, expected {SCHEMA_VERSION}"
        )
    recs = [json.loads(x) for x in lines[1:]]
    col = lambda k, dtype: np.array([r[k] for r in recs], dtype=dtype)
    cfg = BallWorldConfig(**manifest["config"])
    sd, ad = cfg.state_dim, cfg.action_dim
    return TransitionDataset(
        manifest,
        col("s", np.float64).reshape(-1, sd), col("a", np.float64).reshape(-1, ad),
        col("s_next", np.float64).reshape(-1, sd), col("r_gt", np.float64),
        col("episode", np.int64), col("t", np.int64), col("done", bool), cfg,
    )


def _largest_remainder(n, fractions):
    quotas = [f * n for f in fractions]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (counts[i] - quotas[i], i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(dataset: TransitionDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Partition whole episodes into (train, val, eval) datasets.

    Episode counts follow ``fractions`` by largest remainder. Every split
    with a positive fraction must receive at least one episode.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    episodes = np.unique(dataset.episode)
    counts = _largest_remainder(len(episodes), fractions)
    if any(f > 0 and c == 0 for f, c in zip(fractions, counts)):
        raise InsufficientEpisodes(
            f"{len(episodes)} episodes cannot cover splits with fractions {fractions}"
        )
    order = np.random.default_rng(seed).permutation(episodes)
    out = []
    start = 0
    for name, c in zip(("train", "val", "eval"), counts):
        chosen = order[start:start + c]
        start += c
        idx = np.flatnonzero(np.isin(dataset.episode, chosen))
        out.append(dataset.take(idx, split=name, split_seed=int(seed)))
    return tuple(out)
