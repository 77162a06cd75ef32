import math

import numpy as np
import pytest

from fusion import env as E
from fusion import policies as P
from fusion.dataset import run_scripted_episode


def view(front_gap=math.inf, front_speed=0.0, speed=10.0, left=None, right=None, changing=False):
    return P.LocalView(speed, front_gap, front_speed, changing, left, right)


def test_equilibrium_at_desired_speed():
    p = P.IDMParams()
    assert P.idm_accel(math.inf, p.v0, p.v0, p) == pytest.approx(0.0, abs=1e-12)


def test_free_road_start_uses_full_acceleration():
    p = P.IDMParams()
    assert P.idm_accel(math.inf, 0.0, 0.0, p) == pytest.approx(p.a_max)


def test_idm_hand_evaluated():
    # s* = 2 + 5 * 1.5 = 9.5; a = 2 [1 - (5/10)^4 - (9.5/20)^2]
    p = P.IDMParams(v0=10, T=1.5, a_max=2, b=3, s0=2)
    expected = 2 * (1 - 0.0625 - (9.5 / 20) ** 2)
    assert P.idm_accel(20.0, 5.0, 5.0, p) == pytest.approx(expected, rel=1e-12)
    assert P.idm_accel(20.0, 5.0, 5.0, p) == pytest.approx(1.4238, abs=1e-4)


def test_idm_nonpositive_gap_brakes_fully():
    assert P.idm_accel(0.0, 5.0, 5.0, P.IDMParams()) == -P.ACCEL_LIMIT
    assert P.idm_accel(-1.0, 5.0, 5.0, P.IDMParams()) == -P.ACCEL_LIMIT


def test_idm_output_clamped():
    assert P.idm_accel(0.5, 20.0, 0.0, P.IDMParams()) == -P.ACCEL_LIMIT


def test_params_must_be_positive():
    with pytest.raises(ValueError):
        P.IDMParams(T=0.0)


def test_profiles():
    assert P.profile("timid").v0 == 10 and P.profile("timid").T == 2.0
    assert P.profile("normal").v0 == 12 and P.profile("normal").T == 1.5
    agg = P.profile("aggressive")
    assert agg.v0 == 16 and agg.T == 0.8 and agg.a_max == 2 * P.IDMParams().a_max
    with pytest.raises(ValueError):
        P.profile("reckless")


def test_default_mix_shares():
    assert sum(w for _, w, _ in P.DEFAULT_POLICY_MIX) == pytest.approx(1.0)
    assert [(n, w) for n, w, _ in P.DEFAULT_POLICY_MIX] == [("timid", 0.4), ("normal", 0.4), ("aggressive", 0.2)]
    assert dict((n, z) for n, _, z in P.DEFAULT_POLICY_MIX)["aggressive"] > 0


def test_empty_road_keeps_lane():
    free = P.LaneGaps()
    assert P.lane_decision(view(left=free, right=free), P.profile("normal")) == 0


def test_blocked_front_moves_to_free_lane():
    p = P.profile("normal")
    blocked = P.LaneGaps(front_gap=3.0, front_speed=0.0, rear_gap=1.0, rear_speed=10.0)
    assert P.lane_decision(view(5.0, 0.0, left=P.LaneGaps(), right=blocked), p) == 1
    assert P.lane_decision(view(5.0, 0.0, left=None, right=P.LaneGaps()), p) == -1


def test_no_lane_change_while_changing():
    assert P.lane_decision(view(5.0, 0.0, left=P.LaneGaps(), changing=True), P.profile("normal")) == 0


def test_aggressive_accepts_smaller_gaps():
    gap = P.LaneGaps(front_gap=30.0, front_speed=10.0, rear_gap=4.0, rear_speed=10.0)
    v = view(5.0, 0.0, left=gap)
    assert P.lane_decision(v, P.profile("timid")) == 0
    assert P.lane_decision(v, P.profile("aggressive")) == 1


def test_act_without_noise_is_deterministic():
    v = view(30.0, 8.0)
    p = P.profile("normal")
    a = P.act(v, p, 0.0, np.random.default_rng(0))
    b = P.act(v, p, 0.0, np.random.default_rng(1))
    assert a == b


def test_act_noise_perturbs_acceleration():
    v = view(30.0, 8.0)
    p = P.profile("aggressive")
    clean = P.act(v, p, 0.0, np.random.default_rng(0))
    noisy = P.act(v, p, 0.25, np.random.default_rng(0))
    assert clean.accel != noisy.accel
    assert abs(noisy.accel) <= P.ACCEL_LIMIT


def test_act_noise_requires_rng():
    with pytest.raises(ValueError):
        P.act(view(), P.profile("normal"), 0.1, None)


def _lane_change_onsets(ep) -> int:
    cmds = ep.actions[:, 1]
    prev = np.concatenate([[0.0], cmds[:-1]])
    return int(np.sum((cmds != 0) & (prev == 0)))


def test_aggressive_changes_lanes_more_than_timid():
    world = E.LaneWorld()
    counts = {}
    for name in ("timid", "aggressive"):
        total = 0
        for seed in range(200):
            ctx = E.sample_context("train", seed)
            ep = run_scripted_episode(world, ctx, P.IDMDriver(P.profile(name), 0.0, seed), name)
            total += _lane_change_onsets(ep)
        counts[name] = total
    assert counts["aggressive"] >= 2 * counts["timid"]


def test_timid_driver_never_speeds_on_free_road():
    world = E.LaneWorld()
    ep = run_scripted_episode(world, E.Context("straight", 1e-9, seed=0), P.IDMDriver(P.profile("timid")), "timid")
    assert ep.reason == "goal"
    assert ep.costs.sum() == 0.0


def test_platoon_is_collision_free():
    res = P.simulate_platoon(10, 1000)
    assert res["collisions"] == 0
    assert res["min_gap"] > 0
    assert res["speeds"].shape == (1000, 10)


def test_idm_driver_seeded():
    ctx = E.sample_context("train", 2)
    a = run_scripted_episode(E.LaneWorld(), ctx, P.IDMDriver(P.profile("aggressive"), 0.25, 5))
    b = run_scripted_episode(E.LaneWorld(), ctx, P.IDMDriver(P.profile("aggressive"), 0.25, 5))
    np.testing.assert_array_equal(a.actions, b.actions)
