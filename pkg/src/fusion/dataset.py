"""Offline episode corpus: collection, return annotation, storage and batching.

On disk a dataset is a directory with ``episodes.jsonl`` (one episode per
line) and ``manifest.json``.  Each episode line holds::

    {"context": {...}, "profile": str, "noise": float, "reason": str,
     "obs": {"ego": [[...]], "beam": [[...]], "nav": [[...]]},
     "final_obs": {"ego": [...], "beam": [...], "nav": [...]},
     "actions": [[accel, lane_cmd], ...], "rewards": [...], "costs": [...],
     "rtg": [...], "ctg": [...]}

``obs[t]`` is the state the action ``actions[t]`` was taken in; ``rewards[t]``
and ``costs[t]`` are what that step produced.  ``final_obs`` is the state the
last step led to.  The manifest records counts, normalisation statistics and
a CRC32 of ``episodes.jsonl``.
"""

from __future__ import annotations

import json
import os
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import env as E
from . import policies as P

SCHEMA_VERSION = 1
FACTORS = ("ego", "beam", "nav")
ACTION_DIM = 2


class DatasetError(Exception):
    pass


@dataclass
class EpisodeRecord:
    context: dict
    obs: dict[str, np.ndarray]
    final_obs: dict[str, np.ndarray]
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    reason: str
    profile: str = "external"
    noise: float = 0.0
    rtg: np.ndarray | None = None
    ctg: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())

    def next_obs(self, factor: str) -> np.ndarray:
        return np.concatenate([self.obs[factor][1:], self.final_obs[factor][None]], axis=0)

    def to_json(self) -> dict:
        return {
            "context": self.context,
            "profile": self.profile,
            "noise": self.noise,
            "reason": self.reason,
            "obs": {k: self.obs[k].tolist() for k in FACTORS},
            "final_obs": {k: self.final_obs[k].tolist() for k in FACTORS},
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "costs": self.costs.tolist(),
            "rtg": self.rtg.tolist(),
            "ctg": self.ctg.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeRecord":
        ep = cls(
            context=d["context"],
            obs={k: np.asarray(d["obs"][k], dtype=float).reshape(-1, E.FACTOR_DIMS[k]) for k in FACTORS},
            final_obs={k: np.asarray(d["final_obs"][k], dtype=float) for k in FACTORS},
            actions=np.asarray(d["actions"], dtype=float).reshape(-1, ACTION_DIM),
            rewards=np.asarray(d["rewards"], dtype=float),
            costs=np.asarray(d["costs"], dtype=float),
            reason=d["reason"],
            profile=d.get("profile", "external"),
            noise=float(d.get("noise", 0.0)),
            rtg=np.asarray(d["rtg"], dtype=float) if "rtg" in d else None,
            ctg=np.asarray(d["ctg"], dtype=float) if "ctg" in d else None,
        )
        n = len(ep.rewards)
        lengths = [len(ep.costs), len(ep.actions)] + [len(ep.obs[k]) for k in FACTORS]
        if any(m != n for m in lengths):
            raise DatasetError("episode arrays have unequal lengths")
        return ep


def suffix_sum(x: np.ndarray) -> np.ndarray:
    return np.cumsum(np.asarray(x, dtype=float)[::-1])[::-1].copy()


def annotate_returns(ep: EpisodeRecord) -> EpisodeRecord:
    """Fill undiscounted reward-to-go and cost-to-go."""
    ep.rtg = suffix_sum(ep.rewards)
    ep.ctg = suffix_sum(ep.costs)
    return ep


def check_suffix_law(ep: EpisodeRecord, tol: float = 1e-9) -> None:
    for name, per, togo in (("rtg", ep.rewards, ep.rtg), ("ctg", ep.costs, ep.ctg)):
        if togo is None or len(togo) != len(per):
            raise DatasetError(f"missing or misaligned {name}")
        nxt = np.append(togo[1:], 0.0)
        scale = max(1.0, float(np.abs(togo).max(initial=0.0)))
        if np.max(np.abs(togo - (per + nxt)), initial=0.0) > tol * scale:
            raise DatasetError(f"{name} violates the suffix-sum law")


# ----------------------------------------------------------------------------
# collection


def run_scripted_episode(world: E.LaneWorld, ctx: E.Context, driver: Callable, profile: str = "", noise: float = 0.0) -> EpisodeRecord:
    obs = world.reset(ctx)
    rows: dict[str, list] = {k: [] for k in FACTORS}
    actions, rewards, costs = [], [], []
    while True:
        for k, v in obs.blocks().items():
            rows[k].append(v)
        a = driver(world)
        out = world.step(a.accel, a.lane_cmd)
        actions.append([a.accel, float(a.lane_cmd)])
        rewards.append(out.reward)
        costs.append(out.cost)
        obs = out.obs
        if out.done:
            break
    ep = EpisodeRecord(
        context=ctx.to_dict(),
        obs={k: np.array(v) for k, v in rows.items()},
        final_obs={k: v.copy() for k, v in obs.blocks().items()},
        actions=np.array(actions),
        rewards=np.array(rewards),
        costs=np.array(costs),
        reason=out.reason,
        profile=profile,
        noise=noise,
    )
    return annotate_returns(ep)


def collect_episodes(
    n_episodes: int,
    split: str = "train",
    policy_mix: Sequence[tuple[str, float, float]] = P.DEFAULT_POLICY_MIX,
    seed: int = 0,
) -> list[EpisodeRecord]:
    if split not in E.SPLITS:
        raise ValueError(f"unknown split {split!r}")
    names = [m[0] for m in policy_mix]
    shares = np.array([m[1] for m in policy_mix], dtype=float)
    shares = shares / shares.sum()
    world = E.LaneWorld()
    episodes = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_episodes)):
        ctx_seed, pick_seed, noise_seed = (int(s) for s in child.generate_state(3))
        ctx = E.sample_context(split, ctx_seed)
        k = int(np.random.default_rng(pick_seed).choice(len(names), p=shares))
        name, _, noise = policy_mix[k]
        driver = P.IDMDriver(P.profile(name), noise, noise_seed)
        episodes.append(run_scripted_episode(world, ctx, driver, name, noise))
    return episodes


# ----------------------------------------------------------------------------
# dataset container


def compute_stats(episodes: Sequence[EpisodeRecord]) -> dict:
    r = np.concatenate([e.rewards for e in episodes])
    c = np.concatenate([e.costs for e in episodes])
    rtg = np.concatenate([e.rtg for e in episodes])
    ctg = np.concatenate([e.ctg for e in episodes])
    returns = np.array([e.total_reward for e in episodes])
    ep_costs = np.array([e.total_cost for e in episodes])
    return {
        "reward_mean": float(r.mean()),
        "reward_std": float(r.std()),
        "cost_mean": float(c.mean()),
        "cost_std": float(c.std()),
        "rtg_mean": float(rtg.mean()),
        "rtg_std": float(rtg.std()),
        "ctg_mean": float(ctg.mean()),
        "ctg_std": float(ctg.std()),
        "return_p90": float(np.percentile(returns, 90)),
        "return_mean": float(returns.mean()),
        "episode_cost_mean": float(ep_costs.mean()),
    }


@dataclass
class Batch:
    """Length-H windows, left-padded; ``mask[b, h]`` is True on real steps."""

    obs: dict[str, np.ndarray]  # (B, H, dim)
    prev_actions: np.ndarray  # (B, H, 2): a_{t-1}, zeros at episode start
    rtg: np.ndarray  # (B, H)
    ctg: np.ndarray
    actions: np.ndarray  # (B, H, 2): a_t targets
    rewards: np.ndarray  # (B, H)
    costs: np.ndarray
    next_obs: dict[str, np.ndarray]
    mask: np.ndarray  # (B, H) bool
    index: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))  # (episode, end step)

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def horizon(self) -> int:
        return self.mask.shape[1]


class OfflineDataset:
    def __init__(self, episodes: Sequence[EpisodeRecord], meta: dict | None = None):
        self.episodes = list(episodes)
        for ep in self.episodes:
            if ep.rtg is None or ep.ctg is None:
                annotate_returns(ep)
        self.meta = dict(meta or {})
        self.stats = compute_stats(self.episodes) if self.episodes else {}
        self._lengths = np.array([len(e) for e in self.episodes], dtype=int)
        self._offsets = np.concatenate([[0], np.cumsum(self._lengths)])
        self._next_cache: dict[int, dict[str, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def total_steps(self) -> int:
        return int(self._offsets[-1])

    def manifest(self) -> dict:
        hist = Counter(e.context["layout_id"] for e in self.episodes)
        splits = Counter(e.context.get("split", "train") for e in self.episodes)
        return {
            "schema_version": SCHEMA_VERSION,
            "episode_count": len(self.episodes),
            "total_steps": self.total_steps,
            "context_histogram": dict(sorted(hist.items())),
            "split_histogram": dict(sorted(splits.items())),
            "stats": self.stats,
            **({"meta": self.meta} if self.meta else {}),
        }

    def _next(self, i: int) -> dict[str, np.ndarray]:
        if i not in self._next_cache:
            self._next_cache[i] = {k: self.episodes[i].next_obs(k) for k in FACTORS}
        return self._next_cache[i]

    def window(self, ep_idx: int, end: int, H: int) -> dict:
        """Arrays for steps ``end-H+1 .. end`` of one episode, left padded."""
        ep = self.episodes[ep_idx]
        start = max(0, end - H + 1)
        n = end - start + 1
        pad = H - n
        sl = slice(start, end + 1)

        def padded(a: np.ndarray) -> np.ndarray:
            out = np.zeros((H,) + a.shape[1:])
            out[pad:] = a[sl]
            return out

        prev = np.zeros((len(ep), ACTION_DIM))
        prev[1:] = ep.actions[:-1]
        nxt = self._next(ep_idx)
        mask = np.zeros(H, dtype=bool)
        mask[pad:] = True
        return {
            "obs": {k: padded(ep.obs[k]) for k in FACTORS},
            "prev_actions": padded(prev),
            "rtg": padded(ep.rtg),
            "ctg": padded(ep.ctg),
            "actions": padded(ep.actions),
            "rewards": padded(ep.rewards),
            "costs": padded(ep.costs),
            "next_obs": {k: padded(nxt[k]) for k in FACTORS},
            "mask": mask,
        }

    def sample_index(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform over all stored steps: (episode, end step) pairs."""
        if self.total_steps == 0:
            raise DatasetError("cannot sample from an empty dataset")
        g = rng.integers(self.total_steps, size=batch_size)
        ep = np.searchsorted(self._offsets, g, side="right") - 1
        return np.stack([ep, g - self._offsets[ep]], axis=1)

    def make_batch(self, index: np.ndarray, H: int) -> Batch:
        if H < 1:
            raise ValueError("window length H must be >= 1")
        wins = [self.window(int(e), int(t), H) for e, t in index]
        return Batch(
            obs={k: np.stack([w["obs"][k] for w in wins]) for k in FACTORS},
            prev_actions=np.stack([w["prev_actions"] for w in wins]),
            rtg=np.stack([w["rtg"] for w in wins]),
            ctg=np.stack([w["ctg"] for w in wins]),
            actions=np.stack([w["actions"] for w in wins]),
            rewards=np.stack([w["rewards"] for w in wins]),
            costs=np.stack([w["costs"] for w in wins]),
            next_obs={k: np.stack([w["next_obs"][k] for w in wins]) for k in FACTORS},
            mask=np.stack([w["mask"] for w in wins]),
            index=np.asarray(index, dtype=int),
        )

    def sample_windows(self, batch_size: int, H: int, rng: np.random.Generator) -> Batch:
        return self.make_batch(self.sample_index(batch_size, rng), H)


# ----------------------------------------------------------------------------
# storage


def _crc32(path: Path) -> int:
    crc = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            crc = zlib.crc32(chunk, crc)
    return crc & 0xFFFFFFFF


def save(dataset: OfflineDataset, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ep_path = path / "episodes.jsonl"
    man_path = path / "manifest.json"
    try:
        with open(ep_path, "w") as fh:
            for ep in dataset.episodes:
                fh.write(json.dumps(ep.to_json(), separators=(",", ":")))
                fh.write("\n")
        manifest = dataset.manifest()
        manifest["checksums"] = {"episodes.jsonl": _crc32(ep_path)}
        man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError:
        for p in (ep_path, man_path):
            p.unlink(missing_ok=True)
        raise
    return path


def load(path: str | os.PathLike) -> OfflineDataset:
    path = Path(path)
    man_path = path / "manifest.json"
    ep_path = path / "episodes.jsonl"
    try:
        manifest = json.loads(man_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{man_path}: unreadable manifest ({exc})") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"schema version {manifest.get('schema_version')} != {SCHEMA_VERSION}")
    expected = manifest.get("checksums", {}).get("episodes.jsonl")
    if expected is None or _crc32(ep_path) != expected:
        raise DatasetError(f"{ep_path}: checksum mismatch (truncated or modified file)")
    episodes = []
    with open(ep_path) as fh:
        for line in fh:
            if line.strip():
                episodes.append(EpisodeRecord.from_json(json.loads(line)))
    for ep in episodes:
        if ep.rtg is None or ep.ctg is None:
            annotate_returns(ep)
        check_suffix_law(ep)
    if len(episodes) != manifest.get("episode_count"):
        raise DatasetError("episode count does not match manifest")
    ds = OfflineDataset(episodes, manifest.get("meta"))
    if ds.total_steps != manifest.get("total_steps"):
        raise DatasetError("step count does not match manifest")
    return ds


def collect(
    n_episodes: int,
    split: str = "train",
    policy_mix: Sequence[tuple[str, float, float]] = P.DEFAULT_POLICY_MIX,
    seed: int = 0,
    out: str | os.PathLike | None = None,
) -> OfflineDataset:
    episodes = collect_episodes(n_episodes, split, policy_mix, seed)
    ds = OfflineDataset(episodes, {"split": split, "seed": seed, "policy_mix": [list(m) for m in policy_mix]})
    if out is not None:
        save(ds, out)
    return ds
