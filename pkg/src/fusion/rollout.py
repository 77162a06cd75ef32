"""Online inference with return/cost tokens and the evaluation harness.

The agent starts from ``(C_0, R_0, s_0)``.  After each environment step it
reads the value heads on the new state and rewrites the conditioning tokens
with an optimistic reward rule and a pessimistic cost rule::

    R_t = max(R_hat(s_t), R_{t-1} - r_{t-1})
    C_t = min(C_hat(s_t), C_{t-1} - c_{t-1})

``evaluate`` runs a policy over seeded contexts from the training split
(``policy`` setting) or the denser held-out split (``dynamics`` setting) and
summarises reward, cost, success and five safety categories.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import env as E
from .dataset import ACTION_DIM, FACTORS, Batch
from .model import CausalTransformer
from .policies import ACCEL_LIMIT, IDMDriver, profile

SETTINGS = {"policy": "train", "dynamics": "test"}
CATEGORIES = ("AR", "NS", "IT", "CF", "SL")
SPEED_LIMIT_KPH = 40.0


@dataclass(frozen=True)
class RolloutConfig:
    R0: float | None = None  # None: taken from the checkpoint's dataset statistics
    C0: float = 1.0
    H: int = 20
    episode_cap: int = E.HORIZON
    deterministic: bool = True

    def __post_init__(self):
        if self.C0 < 0:
            raise ValueError("C0 must be non-negative")
        if self.H < 1:
            raise ValueError("H must be >= 1")


def update_tokens(R_prev: float, C_prev: float, r_t: float, c_t: float, R_hat: float, C_hat: float) -> tuple[float, float]:
    return max(R_hat, R_prev - r_t), min(C_hat, C_prev - c_t)


# ----------------------------------------------------------------------------
# agents


class Agent:
    """Interface: ``reset`` once per episode, then ``act``/``observe`` per step."""

    def reset(self, env: E.LaneWorld, obs: E.FactoredObservation, rng: np.random.Generator) -> None:
        pass

    def act(self, env: E.LaneWorld, obs: E.FactoredObservation) -> tuple[float, int]:
        raise NotImplementedError

    def observe(self, outcome: E.StepOutcome) -> None:
        pass

    def trace_extra(self) -> dict:
        return {}


class ScriptedAgent(Agent):
    """IDM driver with one of the named profiles."""

    def __init__(self, name: str = "normal", noise_level: float = 0.0):
        self.params = profile(name)
        self.noise_level = noise_level
        self.driver = None

    def reset(self, env, obs, rng):
        self.driver = IDMDriver(self.params, self.noise_level, seed=int(rng.integers(2**32)))

    def act(self, env, obs):
        a = self.driver(env)
        return a.accel, a.lane_cmd


class CollideAgent(Agent):
    """Full throttle into the nearest thing ahead; used to exercise failure paths."""

    def act(self, env, obs):
        ego = env.ego
        if ego.change_dir != 0:
            return ACCEL_LIMIT, 0
        ahead = [(t.state.x - ego.x, t.state.lane) for t in env.traffic if t.state.x > ego.x]
        ahead += [(ox - ego.x, ol) for ox, ol in env.layout.obstacles if ox > ego.x]
        if not ahead:
            return ACCEL_LIMIT, 0
        _, lane = min(ahead)
        return ACCEL_LIMIT, int(np.sign(lane - ego.lane))


class DecisionAgent(Agent):
    """Sequence-model policy conditioned on rolling return/cost tokens."""

    def __init__(self, model: CausalTransformer, cfg: RolloutConfig):
        if cfg.H > model.cfg.context_len:
            raise ValueError(f"rollout context {cfg.H} exceeds the model's {model.cfg.context_len}")
        if cfg.R0 is None:
            raise ValueError("RolloutConfig.R0 must be set")
        self.model = model
        self.cfg = cfg

    def reset(self, env, obs, rng):
        self.rng = rng
        self.obs = {f: [] for f in FACTORS}
        self.prev_actions: list[np.ndarray] = []
        self.R: list[float] = []
        self.C: list[float] = []
        self.R_hat: list[float] = []
        self.C_hat: list[float] = []
        self._push(obs, np.zeros(ACTION_DIM), float(self.cfg.R0), float(self.cfg.C0))

    def _push(self, obs: E.FactoredObservation, prev_action: np.ndarray, R: float, C: float) -> None:
        for f, block in obs.blocks().items():
            self.obs[f].append(block)
        self.prev_actions.append(prev_action)
        self.R.append(R)
        self.C.append(C)

    def window(self) -> Batch:
        """Newest ``H`` steps of the token buffer as a one-row batch."""
        n = min(len(self.prev_actions), self.cfg.H)
        sl = slice(-n, None)
        zeros = np.zeros((1, n))
        return Batch(
            obs={f: np.asarray(self.obs[f][sl])[None] for f in FACTORS},
            prev_actions=np.asarray(self.prev_actions[sl])[None],
            rtg=np.asarray(self.R[-n:])[None],
            ctg=np.asarray(self.C[-n:])[None],
            actions=np.zeros((1, n, ACTION_DIM)),
            rewards=zeros,
            costs=zeros,
            next_obs={},
            mask=np.ones((1, n), dtype=bool),
        )

    def act(self, env, obs):
        out = self.model.forward(self.model.tokenize(self.window()), None, training=False)
        mu = out.action[0].data[0, -1]
        if not self.cfg.deterministic:
            sigma = np.exp(np.clip(out.action[1].data[0, -1], -5.0, 2.0))
            mu = mu + sigma * self.rng.standard_normal(mu.shape)
        accel = float(np.clip(mu[0] * ACCEL_LIMIT, -ACCEL_LIMIT, ACCEL_LIMIT))
        lane_cmd = int(np.clip(np.rint(mu[1]), -1, 1))
        self._last_action = np.array([accel, float(lane_cmd)])
        return accel, lane_cmd

    def observe(self, outcome):
        R_hat, C_hat = self.model.predict_values(outcome.obs.blocks())
        R, C = update_tokens(self.R[-1], self.C[-1], outcome.reward, outcome.cost, R_hat, C_hat)
        self.R_hat.append(R_hat)
        self.C_hat.append(C_hat)
        self._push(outcome.obs, self._last_action, R, C)
        # only the newest H steps of the state/action buffers are read back
        if len(self.prev_actions) > 4 * self.cfg.H:
            keep = self.cfg.H
            for f in FACTORS:
                del self.obs[f][:-keep]
            del self.prev_actions[:-keep]

    def trace_extra(self) -> dict:
        return {"rtg": list(self.R), "ctg": list(self.C), "rtg_hat": self.R_hat, "ctg_hat": self.C_hat}


def run_episode(agent: Agent, world: E.LaneWorld, ctx: E.Context, rng: np.random.Generator, cap: int = E.HORIZON) -> dict:
    """Roll one episode; returns a JSON-ready trace."""
    obs = world.reset(ctx)
    agent.reset(world, obs, rng)
    rewards, costs, speeds, actions = [], [], [], []
    collision = off_road = False
    reason = "running"
    while True:
        accel, lane_cmd = agent.act(world, obs)
        out = world.step(accel, lane_cmd)
        agent.observe(out)
        obs = out.obs
        rewards.append(out.reward)
        costs.append(out.cost)
        speeds.append(out.info["speed_kph"])
        actions.append([accel, lane_cmd])
        collision |= out.info["collision"]
        off_road |= out.info["out_of_road"]
        reason = out.reason
        if out.done:
            break
        if len(rewards) >= cap:
            reason = "timeout"
            break
    return {
        "context": ctx.to_dict(),
        "steps": len(rewards),
        "reason": reason,
        "success": reason == "goal",
        "collision": bool(collision),
        "out_of_road": bool(off_road),
        "reward": float(sum(rewards)),
        "cost": float(sum(costs)),
        "rewards": rewards,
        "costs": costs,
        "speed_kph": speeds,
        "actions": actions,
        **agent.trace_extra(),
    }


# ----------------------------------------------------------------------------
# metrics


def safety_categories(traces: list[dict]) -> dict[str, float]:
    """AR arrival, NS step share at or under the speed limit, IT terminated
    before the step cap, CF collision-free, SL never left the road."""
    if not traces:
        raise ValueError("safety_categories needs at least one trace")
    n = len(traces)
    steps = sum(len(t["speed_kph"]) for t in traces)
    slow = sum(sum(1 for v in t["speed_kph"] if v <= SPEED_LIMIT_KPH) for t in traces)
    return {
        "AR": sum(t["reason"] == "goal" for t in traces) / n,
        "NS": slow / steps if steps else 1.0,
        "IT": sum(t["reason"] != "timeout" for t in traces) / n,
        "CF": sum(not t["collision"] for t in traces) / n,
        "SL": sum(not t["out_of_road"] for t in traces) / n,
    }


def _mean_stderr(x) -> dict[str, float]:
    x = np.asarray(x, dtype=float)
    err = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return {"mean": float(x.mean()), "stderr": err}


@dataclass
class EvalReport:
    setting: str
    split: str
    density_multiplier: float
    n_episodes: int
    seeds: list[int]
    R0: float | None
    C0: float
    episodes: list[dict]
    aggregates: dict
    categories: dict
    traces: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("traces")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def categories_csv(self) -> str:
        """Layout x category matrix (plus an ``overall`` row)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layout", *CATEGORIES])
        rows = dict(self.categories["per_layout"])
        rows["overall"] = self.categories["overall"]
        for name, cats in rows.items():
            w.writerow([name, *(f"{cats[c]:.6f}" for c in CATEGORIES)])
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "categories.csv").write_text(self.categories_csv())
        with open(out / "traces.jsonl", "w") as fh:
            for t in self.traces:
                fh.write(json.dumps(t, sort_keys=True) + "\n")
        return out


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def evaluate(policy, setting: str, n_episodes: int, seeds, cfg: RolloutConfig | None = None) -> EvalReport:
    """Run ``n_episodes`` per seed; ``policy`` is a model or an :class:`Agent`."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; expected one of {sorted(SETTINGS)}")
    split = SETTINGS[setting]
    cfg = cfg or RolloutConfig()
    if isinstance(policy, CausalTransformer):
        agent: Agent = DecisionAgent(policy, cfg)
        R0 = cfg.R0
    else:
        agent = policy
        R0 = None
    world = E.LaneWorld()
    traces = []
    seeds = [int(s) for s in seeds]
    for s in seeds:
        for i in range(n_episodes):
            es = episode_seed(s, i)
            ctx = E.sample_context(split, es)
            tr = run_episode(agent, world, ctx, np.random.default_rng([es, 1]), cfg.episode_cap)
            tr.update(seed=s, index=i)
            traces.append(tr)
    traces.sort(key=lambda t: (t["seed"], t["index"]))
    episodes = [
        {k: t[k] for k in ("seed", "index", "reward", "cost", "success", "reason", "steps", "collision", "out_of_road")}
        | {"layout_id": t["context"]["layout_id"], "traffic_density": t["context"]["traffic_density"]}
        for t in traces
    ]
    aggregates = {
        "reward": _mean_stderr([e["reward"] for e in episodes]),
        "cost": _mean_stderr([e["cost"] for e in episodes]),
        "success_rate": float(np.mean([e["success"] for e in episodes])),
    }
    layouts = sorted({e["layout_id"] for e in episodes})
    categories = {
        "overall": safety_categories(traces),
        "per_layout": {l: safety_categories([t for t in traces if t["context"]["layout_id"] == l]) for l in layouts},
    }
    return EvalReport(
        setting=setting,
        split=split,
        density_multiplier=E.TEST_DENSITY_FACTOR if split == "test" else 1.0,
        n_episodes=n_episodes,
        seeds=seeds,
        R0=R0,
        C0=cfg.C0,
        episodes=episodes,
        aggregates=aggregates,
        categories=categories,
        traces=traces,
    )


__all__ = [
    "RolloutConfig", "update_tokens", "Agent", "ScriptedAgent", "CollideAgent", "DecisionAgent", "run_episode",
    "safety_categories", "EvalReport", "evaluate", "SETTINGS", "CATEGORIES",
]
