"""Scripted drivers: the Intelligent Driver Model plus a gap-acceptance lane rule.

These controllers drive the background traffic and, with optional action
noise, the ego vehicle during offline data collection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

ACCEL_LIMIT = 4.0


@dataclass(frozen=True)
class IDMParams:
    v0: float = 10.0  # desired speed, m/s
    T: float = 1.5  # time headway, s
    a_max: float = 2.0
    b: float = 3.0  # comfortable deceleration
    s0: float = 2.0  # jam distance
    delta: float = 4.0
    label: str = "default"

    def __post_init__(self):
        for k in ("v0", "T", "a_max", "b", "s0", "delta"):
            if getattr(self, k) <= 0:
                raise ValueError(f"IDMParams.{k} must be positive")

    @property
    def aggressive(self) -> bool:
        return self.label == "aggressive"


PROFILES: dict[str, IDMParams] = {
    "timid": IDMParams(v0=10.0, T=2.0, a_max=2.0, b=3.0, s0=2.0, label="timid"),
    "normal": IDMParams(v0=12.0, T=1.5, a_max=2.0, b=3.0, s0=2.0, label="normal"),
    "aggressive": IDMParams(v0=16.0, T=0.8, a_max=4.0, b=3.0, s0=2.0, label="aggressive"),
}

# (profile, share of episodes, accel noise level) for offline data collection
DEFAULT_POLICY_MIX: tuple[tuple[str, float, float], ...] = (
    ("timid", 0.4, 0.0),
    ("normal", 0.4, 0.0),
    ("aggressive", 0.2, 0.25),
)


def profile(name: str) -> IDMParams:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown driver profile {name!r}") from None


def profile_from_dict(d: dict) -> IDMParams:
    return IDMParams(**d)


@dataclass(frozen=True)
class LaneGaps:
    """Front/rear neighbour in one lane, measured bumper to bumper."""

    front_gap: float = math.inf
    front_speed: float = 0.0
    rear_gap: float = math.inf
    rear_speed: float = 0.0


@dataclass(frozen=True)
class LocalView:
    """What a scripted driver perceives about its immediate surroundings."""

    speed: float
    front_gap: float
    front_speed: float
    changing: bool = False
    left: LaneGaps | None = None  # None when the lane does not exist
    right: LaneGaps | None = None


def idm_accel(s: float, v: float, v_lead: float, p: IDMParams) -> float:
    """IDM acceleration for bumper gap ``s`` to a leader at ``v_lead``.

    Clamped to the environment's action range; a non-positive gap brakes fully.
    """
    if s <= 0:
        return -ACCEL_LIMIT
    dv = v - v_lead
    s_star = p.s0 + max(0.0, v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b)))
    free = (v / p.v0) ** p.delta
    inter = 0.0 if math.isinf(s) else (s_star / s) ** 2
    a = p.a_max * (1.0 - free - inter)
    return min(ACCEL_LIMIT, max(-ACCEL_LIMIT, a))


def _acceptable(gaps: LaneGaps | None, view: LocalView, p: IDMParams, scale: float) -> bool:
    if gaps is None:
        return False
    if gaps.front_gap <= view.front_gap + p.s0:
        return False
    if gaps.front_gap <= 2.0 * p.s0 * scale:
        return False
    closing = max(0.0, gaps.rear_speed - view.speed)
    return gaps.rear_gap > scale * (2.0 * p.s0 + closing * p.T)


def lane_decision(view: LocalView, p: IDMParams, rng: np.random.Generator | None = None) -> int:
    """Gap-acceptance lane choice: -1 right, +1 left, 0 keep.

    Triggered when the front gap is shorter than the headway distance at the
    desired speed and the leader is slower than desired. Aggressive drivers
    accept half-size gaps.
    """
    if view.changing:
        return 0
    if view.front_gap >= p.T * max(view.speed, p.v0) or view.front_speed >= p.v0 - 0.5:
        return 0
    scale = 0.5 if p.aggressive else 1.0
    options = [(cmd, g) for cmd, g in ((1, view.left), (-1, view.right)) if _acceptable(g, view, p, scale)]
    if not options:
        return 0
    best = max(g.front_gap for _, g in options)
    picks = [cmd for cmd, g in options if g.front_gap == best]
    if len(picks) > 1 and rng is not None:
        return int(picks[int(rng.integers(len(picks)))])
    return int(picks[0])


@dataclass(frozen=True)
class Action:
    accel: float
    lane_cmd: int

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, float(self.lane_cmd)])


def act(view: LocalView, p: IDMParams, noise_level: float = 0.0, rng: np.random.Generator | None = None) -> Action:
    """IDM longitudinal control + lane rule, with optional Gaussian accel noise."""
    accel = idm_accel(view.front_gap, view.speed, view.front_speed, p)
    lane_cmd = lane_decision(view, p, rng)
    if noise_level > 0:
        if rng is None:
            raise ValueError("noise_level > 0 requires an rng")
        accel += float(rng.normal(0.0, noise_level * ACCEL_LIMIT))
    return Action(min(ACCEL_LIMIT, max(-ACCEL_LIMIT, accel)), lane_cmd)


class IDMDriver:
    """Callable ego controller used for data collection and baselines."""

    def __init__(self, params: IDMParams, noise_level: float = 0.0, seed: int | None = 0):
        self.params = params
        self.noise_level = noise_level
        self.rng = np.random.default_rng(seed)

    def __call__(self, env) -> Action:
        return act(env.ego_view(), self.params, self.noise_level, self.rng)


def simulate_platoon(
    n_vehicles: int = 10,
    steps: int = 1000,
    params: IDMParams | None = None,
    dt: float = 0.1,
    length: float = 5.0,
    spacing: float = 20.0,
    leader_speeds: np.ndarray | None = None,
) -> dict:
    """Single-lane noise-free IDM platoon with semi-implicit Euler updates.

    The leader follows ``leader_speeds`` (defaults to a brake-and-recover
    profile); followers run IDM.  Returns the count of overlapping pairs,
    the minimum gap seen and the (steps, n) speed history.
    """
    p = params or IDMParams()
    x = -spacing * np.arange(n_vehicles, dtype=float)
    v = np.full(n_vehicles, p.v0 * 0.8)
    if leader_speeds is None:
        t = np.arange(steps) * dt
        leader_speeds = np.where((t > 20) & (t < 30), 2.0, p.v0 * 0.8)
    collisions = 0
    min_gap = math.inf
    speeds = np.empty((steps, n_vehicles))
    for k in range(steps):
        acc = np.empty(n_vehicles)
        acc[0] = np.clip((leader_speeds[k] - v[0]) / dt, -ACCEL_LIMIT, ACCEL_LIMIT)
        for i in range(1, n_vehicles):
            gap = x[i - 1] - x[i] - length
            acc[i] = idm_accel(gap, v[i], v[i - 1], p)
        v = np.clip(v + acc * dt, 0.0, None)
        x = x + v * dt
        gaps = x[:-1] - x[1:] - length
        collisions += int(np.sum(gaps <= 0))
        min_gap = min(min_gap, float(gaps.min()))
        speeds[k] = v
    return {"collisions": collisions, "min_gap": min_gap, "speeds": speeds}


def with_label(p: IDMParams, label: str) -> IDMParams:
    return replace(p, label=label)
