"""LaneWorld: a deterministic multi-lane highway with scripted IDM traffic.

Each episode is one instantiation of a constrained contextual MDP.  The
context fixes the road layout, traffic density and driver mix; the ego
vehicle drives from x=0 to the goal at the end of the road.

Lanes are indexed from the right (lane 0); ``lane_cmd=+1`` moves left.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import policies
from .policies import IDMParams, LaneGaps, LocalView

ROAD_LENGTH = 500.0
DT = 0.1
CAR_LENGTH = 5.0
LANE_WIDTH = 3.5
V_MAX = 20.0
HORIZON = 1000
MAX_LANES = 4
N_BEAMS = 16
BEAM_RANGE = 50.0
NAV_RANGE = 100.0
LANE_CHANGE_STEPS = 10
START_CLEARANCE = 20.0
TEST_DENSITY_FACTOR = 1.5

EGO_DIM = 3 + MAX_LANES
BEAM_DIM = N_BEAMS
NAV_DIM = 3
FACTOR_DIMS = {"ego": EGO_DIM, "beam": BEAM_DIM, "nav": NAV_DIM}

REASONS = ("running", "goal", "collision", "out_of_road", "timeout")


# ----------------------------------------------------------------------------
# layouts and contexts


@dataclass(frozen=True)
class RoadLayout:
    layout_id: str
    lane_count: int
    obstacles: tuple[tuple[float, int], ...] = ()
    base_density: float = 1.5  # vehicles per 100 m
    length: float = ROAD_LENGTH

    def __post_init__(self):
        if not 2 <= self.lane_count <= MAX_LANES:
            raise ValueError(f"{self.layout_id}: lane_count must be in [2, {MAX_LANES}]")
        for x, lane in self.obstacles:
            if not 0 < x < self.length or not 0 <= lane < self.lane_count:
                raise ValueError(f"{self.layout_id}: obstacle {(x, lane)} outside the road")

    @property
    def goal(self) -> float:
        return self.length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obstacles"] = [list(o) for o in self.obstacles]
        d["goal"] = self.goal
        return d


LAYOUTS: dict[str, RoadLayout] = {
    l.layout_id: l
    for l in (
        RoadLayout("straight", 3, (), 1.5),
        RoadLayout("curve_speed_zone", 2, (), 1.2),
        RoadLayout("merge", 3, ((220.0, 0),), 1.5),
        RoadLayout("bottleneck", 3, ((250.0, 0), (250.0, 2)), 1.5),
        RoadLayout("dense_obstacle", 4, ((120.0, 1), (180.0, 3), (240.0, 0), (300.0, 2), (360.0, 1), (420.0, 3)), 1.8),
        RoadLayout("roundabout_proxy", 2, ((100.0, 1), (200.0, 0), (300.0, 1), (400.0, 0)), 1.2),
    )
}
TRAIN_LAYOUTS = ("straight", "curve_speed_zone", "merge", "bottleneck")
TEST_LAYOUTS = tuple(LAYOUTS)
SPLITS = {"train": TRAIN_LAYOUTS, "test": TEST_LAYOUTS}

DEFAULT_AGGRESSIVENESS = (("timid", 0.4), ("normal", 0.4), ("aggressive", 0.2))


def layout_registry_json() -> str:
    return json.dumps({k: v.to_dict() for k, v in LAYOUTS.items()}, indent=1, sort_keys=True)


def load_layout_registry(text: str) -> dict[str, RoadLayout]:
    out = {}
    for k, d in json.loads(text).items():
        out[k] = RoadLayout(
            d["layout_id"], int(d["lane_count"]), tuple((float(x), int(l)) for x, l in d["obstacles"]),
            float(d["base_density"]), float(d["length"]),
        )
    return out


@dataclass(frozen=True)
class Context:
    layout_id: str
    traffic_density: float
    aggressiveness_mix: tuple[tuple[str, float], ...] = DEFAULT_AGGRESSIVENESS
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.layout_id not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout_id!r}")
        if not self.traffic_density > 0:
            raise ValueError("traffic_density must be positive")

    @property
    def layout(self) -> RoadLayout:
        return LAYOUTS[self.layout_id]

    def to_dict(self) -> dict:
        return {
            "layout_id": self.layout_id,
            "traffic_density": self.traffic_density,
            "aggressiveness_mix": [list(p) for p in self.aggressiveness_mix],
            "seed": self.seed,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Context":
        return cls(
            d["layout_id"], float(d["traffic_density"]),
            tuple((str(a), float(b)) for a, b in d["aggressiveness_mix"]), int(d["seed"]), d.get("split", "train"),
        )


def sample_context(split: str, rng_seed: int) -> Context:
    """Draw a context; the test split adds held-out layouts and 1.5x traffic."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(SPLITS)}")
    layout_ss, density_ss = np.random.SeedSequence(rng_seed).spawn(2)
    layouts = SPLITS[split]
    layout_id = layouts[int(np.random.default_rng(layout_ss).integers(len(layouts)))]
    jitter = float(np.random.default_rng(density_ss).uniform(0.8, 1.2))
    density = LAYOUTS[layout_id].base_density * jitter
    if split == "test":
        density *= TEST_DENSITY_FACTOR
    return Context(layout_id, density, DEFAULT_AGGRESSIVENESS, int(rng_seed), split)


# ----------------------------------------------------------------------------
# reward and cost


@dataclass(frozen=True)
class RewardWeights:
    forward: float = 1.0
    speed: float = 0.01
    terminal: float = 10.0


@dataclass(frozen=True)
class CostWeights:
    collision: float = 1.0
    out_of_road: float = 1.0
    overspeed: float = 1.0
    v_limit_kph: float = 40.0
    overspeed_coef: float = 0.02


@dataclass
class VehicleState:
    x: float
    lane: int
    v: float
    length: float = CAR_LENGTH
    change_dir: int = 0
    change_steps: int = 0

    @property
    def lateral(self) -> float:
        return self.change_steps / LANE_CHANGE_STEPS

    @property
    def lateral_position(self) -> float:
        return self.lane + self.change_dir * self.lateral

    def lanes(self) -> tuple[int, ...]:
        if self.change_dir == 0:
            return (self.lane,)
        return (self.lane, self.lane + self.change_dir)

    def copy(self) -> "VehicleState":
        return VehicleState(self.x, self.lane, self.v, self.length, self.change_dir, self.change_steps)


def reward_fn(prev: VehicleState, cur: VehicleState, reached_goal: bool, w: RewardWeights = RewardWeights()) -> float:
    return w.forward * (cur.x - prev.x) + w.speed * cur.v + w.terminal * float(reached_goal)


def cost_fn(collision: bool, out_of_road: bool, v_kph: float, w: CostWeights = CostWeights()) -> float:
    over = max(0.0, w.overspeed_coef * (v_kph - w.v_limit_kph))
    return w.collision * float(collision) + w.out_of_road * float(out_of_road) + w.overspeed * over


def kph(v: float) -> float:
    return v * 3.6


# ----------------------------------------------------------------------------
# observation


@dataclass(frozen=True)
class FactoredObservation:
    ego: np.ndarray
    beam: np.ndarray
    nav: np.ndarray

    def blocks(self) -> dict[str, np.ndarray]:
        return {"ego": self.ego, "beam": self.beam, "nav": self.nav}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.ego, self.beam, self.nav])


_BEAM_ANGLES = (np.arange(N_BEAMS) + 0.5) * (2 * math.pi / N_BEAMS)
_BEAM_SIN = np.sin(_BEAM_ANGLES)


@dataclass
class StepOutcome:
    obs: FactoredObservation
    reward: float
    cost: float
    done: bool
    reason: str
    info: dict = field(default_factory=dict)


@dataclass
class _Traffic:
    state: VehicleState
    params: IDMParams


class LaneWorld:
    """Single-ego simulator.  ``reset(ctx)`` then ``step(accel, lane_cmd)``."""

    def __init__(self, reward_weights: RewardWeights = RewardWeights(), cost_weights: CostWeights = CostWeights()):
        self.rw = reward_weights
        self.cw = cost_weights
        self.ctx: Context | None = None
        self.ego: VehicleState | None = None
        self.traffic: list[_Traffic] = []
        self.t = 0
        self.done = True
        self.reason = "running"

    # -- setup ---------------------------------------------------------------
    def reset(self, ctx: Context) -> FactoredObservation:
        self.ctx = ctx
        self.layout = ctx.layout
        self.rng = np.random.default_rng(np.random.SeedSequence([ctx.seed, 0x1A4E]))
        self.ego = VehicleState(0.0, self.layout.lane_count // 2, 0.0)
        self.traffic = self._place_traffic()
        self.t = 0
        self.done = False
        self.reason = "running"
        return self.observe()

    def _place_traffic(self) -> list[_Traffic]:
        lay = self.layout
        rng = self.rng
        n = int(rng.poisson(self.ctx.traffic_density * lay.length / 100.0))
        labels = [a for a, _ in self.ctx.aggressiveness_mix]
        probs = np.array([p for _, p in self.ctx.aggressiveness_mix], dtype=float)
        probs = probs / probs.sum()
        placed: list[_Traffic] = []
        min_sep = 2 * CAR_LENGTH + 2.0
        for _ in range(n):
            for _attempt in range(50):
                lane = int(rng.integers(lay.lane_count))
                x = float(rng.uniform(START_CLEARANCE, lay.length))
                clash = any(t.state.lane == lane and abs(t.state.x - x) < min_sep for t in placed)
                clash = clash or any(ol == lane and abs(ox - x) < min_sep + 10.0 for ox, ol in lay.obstacles)
                if not clash:
                    break
            else:
                continue
            params = policies.profile(labels[int(rng.choice(len(labels), p=probs))])
            v = params.v0 * float(rng.uniform(0.5, 1.0))
            placed.append(_Traffic(VehicleState(x, lane, v), params))
        placed.sort(key=lambda t: t.state.x)
        return placed

    # -- perception ------------------------------------------------------------
    def _objects(self):
        """(x, lanes, speed, length) of every vehicle and obstacle, ego first."""
        objs = [(self.ego.x, self.ego.lanes(), self.ego.v, self.ego.length)]
        objs += [(t.state.x, t.state.lanes(), t.state.v, t.state.length) for t in self.traffic]
        objs += [(x, (lane,), 0.0, CAR_LENGTH) for x, lane in self.layout.obstacles]
        return objs

    def _view(self, idx: int, objs) -> LocalView:
        x, lanes, v, length = objs[idx]
        lane_count = self.layout.lane_count
        me = self.ego if idx == 0 else self.traffic[idx - 1].state
        front_gap, front_speed = math.inf, 0.0
        side: dict[int, list] = {}
        base = me.lane
        for cand in (base - 1, base + 1):
            if 0 <= cand < lane_count:
                side[cand] = [math.inf, 0.0, math.inf, 0.0]
        for j, (xj, lj, vj, lenj) in enumerate(objs):
            if j == idx:
                continue
            dx = xj - x
            if dx > 0 and any(l in lanes for l in lj):
                gap = dx - lenj
                if gap < front_gap:
                    front_gap, front_speed = gap, vj
            for cand, rec in side.items():
                if cand not in lj:
                    continue
                if dx > 0:
                    gap = dx - lenj
                    if gap < rec[0]:
                        rec[0], rec[1] = gap, vj
                else:
                    gap = -dx - length
                    if gap < rec[2]:
                        rec[2], rec[3] = gap, vj
        left = LaneGaps(*side[base + 1]) if base + 1 in side else None
        right = LaneGaps(*side[base - 1]) if base - 1 in side else None
        return LocalView(v, front_gap, front_speed, me.change_dir != 0, left, right)

    def ego_view(self) -> LocalView:
        return self._view(0, self._objects())

    def observe(self) -> FactoredObservation:
        ego = self.ego
        lay = self.layout
        eb = np.zeros(EGO_DIM)
        eb[0] = ego.v / V_MAX
        eb[1] = min(1.0, max(0.0, (lay.length - ego.x) / lay.length))
        eb[2 + ego.lane] = 1.0
        eb[2 + MAX_LANES] = 0.5 + 0.5 * ego.change_dir * ego.lateral
        # beams: nearest object or road edge per angular sector
        beam = np.full(N_BEAMS, BEAM_RANGE)
        y_ego = ego.lateral_position
        others = [(t.state.x, t.state.lateral_position) for t in self.traffic]
        others += [(x, float(l)) for x, l in lay.obstacles]
        if others:
            arr = np.array(others)
            dx = arr[:, 0] - ego.x
            dy = (arr[:, 1] - y_ego) * LANE_WIDTH
            dist = np.hypot(dx, dy) - 0.5 * CAR_LENGTH
            near = dist < BEAM_RANGE
            if near.any():
                ang = np.mod(np.arctan2(dy[near], dx[near]), 2 * math.pi)
                sector = np.minimum((ang / (2 * math.pi / N_BEAMS)).astype(int), N_BEAMS - 1)
                np.minimum.at(beam, sector, np.maximum(dist[near], 0.0))
        left_edge = (lay.lane_count - 0.5 - y_ego) * LANE_WIDTH
        right_edge = (y_ego + 0.5) * LANE_WIDTH
        with np.errstate(divide="ignore"):
            edge = np.where(_BEAM_SIN > 0, left_edge / _BEAM_SIN, -right_edge / _BEAM_SIN)
        beam = np.minimum(beam, np.maximum(edge, 0.0))
        beam = np.clip(beam / BEAM_RANGE, 0.0, 1.0)
        # navigation
        ahead = self._clear_distance(ego.lane, ego.x)
        nav = np.zeros(NAV_DIM)
        nav[0] = min(1.0, ahead / NAV_RANGE)
        nav[1] = max(0.0, 1.0 - self.t / HORIZON)
        best = max(range(lay.lane_count), key=lambda l: (self._clear_distance(l, ego.x), -abs(l - ego.lane)))
        nav[2] = 0.5 + 0.5 * float(np.sign(best - ego.lane))
        return FactoredObservation(eb, beam, nav)

    def _clear_distance(self, lane: int, x: float) -> float:
        gaps = [ox - x - CAR_LENGTH for ox, ol in self.layout.obstacles if ol == lane and ox > x]
        return max(0.0, min(gaps)) if gaps else math.inf

    # -- dynamics ----------------------------------------------------------------
    @staticmethod
    def _advance(s: VehicleState, accel: float, lane_cmd: int) -> None:
        if s.change_dir == 0:
            if lane_cmd != 0:
                s.change_dir, s.change_steps = lane_cmd, 1
        elif lane_cmd == -s.change_dir:
            s.change_steps -= 1
            if s.change_steps <= 0:
                s.change_dir, s.change_steps = 0, 0
        else:
            s.change_steps += 1
            if s.change_steps >= LANE_CHANGE_STEPS:
                s.lane += s.change_dir
                s.change_dir, s.change_steps = 0, 0
        s.v = min(V_MAX, max(0.0, s.v + accel * DT))
        s.x += s.v * DT

    def _collided(self) -> bool:
        e = self.ego
        lanes = e.lanes()
        for t in self.traffic:
            if abs(t.state.x - e.x) < CAR_LENGTH and any(l in lanes for l in t.state.lanes()):
                return True
        return any(abs(ox - e.x) < CAR_LENGTH and ol in lanes for ox, ol in self.layout.obstacles)

    def _off_road(self) -> bool:
        e = self.ego
        if e.change_dir == 0:
            return False
        target = e.lane + e.change_dir
        return not 0 <= target < self.layout.lane_count and e.change_steps > LANE_CHANGE_STEPS // 2

    def step(self, accel: float, lane_cmd: int) -> StepOutcome:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        if lane_cmd not in (-1, 0, 1):
            raise ValueError(f"lane_cmd must be -1, 0 or +1, got {lane_cmd}")
        accel = min(policies.ACCEL_LIMIT, max(-policies.ACCEL_LIMIT, float(accel)))
        objs = self._objects()
        traffic_actions = [
            policies.act(self._view(i + 1, objs), t.params, 0.0, self.rng) for i, t in enumerate(self.traffic)
        ]
        prev = self.ego.copy()
        self._advance(self.ego, accel, int(lane_cmd))
        for t, a in zip(self.traffic, traffic_actions):
            self._advance(t.state, a.accel, a.lane_cmd)
        self.traffic = [t for t in self.traffic if t.state.x < self.layout.length + BEAM_RANGE]
        self.t += 1

        collision = self._collided()
        off_road = self._off_road()
        goal = self.ego.x >= self.layout.goal and not (collision or off_road)
        if collision:
            reason = "collision"
        elif off_road:
            reason = "out_of_road"
        elif goal:
            reason = "goal"
        elif self.t >= HORIZON:
            reason = "timeout"
        else:
            reason = "running"
        v_kph = kph(self.ego.v)
        r = reward_fn(prev, self.ego, goal, self.rw)
        c = cost_fn(collision, off_road, v_kph, self.cw)
        self.done = reason != "running"
        self.reason = reason
        info = {"collision": collision, "out_of_road": off_road, "speed_kph": v_kph, "t": self.t}
        return StepOutcome(self.observe(), r, c, self.done, reason, info)
