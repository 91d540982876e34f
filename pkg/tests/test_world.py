import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focusnav.world import (
    Action,
    ConfigError,
    EpisodeRecord,
    NoTraversableCellError,
    WalkerParams,
    World,
    WorldConfig,
    compute_metrics,
    discounted_return,
    generate_world,
    navigation_command,
    project_goal,
    reward_ori,
    reward_task,
    spawn,
    stability_metric,
    step,
    wrap_angle,
)


def flat_world(pillars=(), size=10.0, res=0.1):
    n = int(round(size / res))
    cfg = WorldConfig(arena_size=size, resolution=res)
    trav = np.ones((n, n), dtype=np.uint8)
    from focusnav.world import mark_discs
    pillars = np.array(pillars, dtype=np.float64).reshape(-1, 3)
    mark_discs(trav, pillars, res)
    return World(cfg, np.zeros((n, n)), trav, ["flat"], pillars, [])


# -- generation ---------------------------------------------------------------------

def test_flat_world_is_level_and_open():
    w = generate_world(WorldConfig(families=("flat",), seed=4))
    assert (w.elevation == 0).all() and (w.traversability == 1).all()


def test_stair_treads_rise_by_configured_height():
    w = generate_world(WorldConfig(families=("stairs",), stair_rise=0.16, seed=0))
    tile = w.elevation[:50, :50]
    levels = np.unique(tile)
    np.testing.assert_allclose(np.diff(levels), 0.16, atol=1e-12)
    # walking inward along a row the treads climb one rise at a time
    row = tile[25, :25]
    steps = np.diff(row)[np.diff(row) != 0]
    np.testing.assert_allclose(steps, 0.16, atol=1e-12)


def test_pillar_footprint_is_untraversable():
    cfg = WorldConfig(families=("flat",), pillar_density=0.1, pillar_radius=(0.15, 0.25), seed=2)
    w = generate_world(cfg)
    assert len(w.pillars)
    for x, y, r in w.pillars:
        i, j = w.cell_of(np.array([x, y]))
        assert w.traversability[i, j] == 0


def test_gap_cells_are_untraversable():
    w = generate_world(WorldConfig(families=("gap",), seed=5))
    gap = w.elevation <= -1.0
    assert gap.any() and (w.traversability[gap] == 0).all()


def test_generation_is_deterministic():
    cfg = WorldConfig(families=("stairs", "slope", "gap", "pillars"), pillar_density=0.05, dynamic_count=2, seed=9)
    a, b = generate_world(cfg), generate_world(cfg)
    np.testing.assert_array_equal(a.elevation, b.elevation)
    np.testing.assert_array_equal(a.traversability, b.traversability)
    assert a.to_json() == b.to_json()


@pytest.mark.parametrize("kw", [dict(resolution=0.0), dict(slope_deg=45.0), dict(stair_rise=0.3),
                                dict(families=("lava",))])
def test_invalid_world_config(kw):
    with pytest.raises(ConfigError):
        generate_world(WorldConfig(**kw))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 500.0))
def test_dynamic_obstacles_stay_in_arena(seed, t):
    w = generate_world(WorldConfig(dynamic_count=3, seed=seed))
    pos = w.dynamic_positions(t)
    assert ((pos >= 0) & (pos <= w.config.arena_size)).all()


def test_dynamic_schedule_is_followed_exactly():
    w = generate_world(WorldConfig(dynamic_count=1, dynamic_speed=0.5, seed=3))
    d = w.dynamic[0]
    np.testing.assert_array_equal(d.position(0.0), d.waypoints[0])
    leg = np.linalg.norm(d.waypoints[1] - d.waypoints[0])
    np.testing.assert_allclose(d.position(leg / 0.5), d.waypoints[1], atol=1e-9)
    np.testing.assert_allclose(d.position(d.cycle_length / 0.5), d.waypoints[0], atol=1e-9)


def test_robot_centric_grid_axes():
    w = flat_world([(6.0, 5.0, 0.3)])
    # facing +x from (5, 5): pillar is 1 m ahead, so in the forward half on the centre line
    trav, elev = w.robot_centric(np.array([5.0, 5.0]), 0.0, 32, 0.1)
    assert trav[16 + 10, 16] == 0 and trav[16 - 10, 16] == 1
    # facing +y the same pillar sits on the robot's right (negative left index)
    trav, _ = w.robot_centric(np.array([5.0, 5.0]), math.pi / 2, 32, 0.1)
    assert trav[16, 16 - 10] == 0 and trav[16, 16 + 10] == 1
    assert (elev == 0).all()


# -- goal projection ---------------------------------------------------------------

def test_project_goal_identity_on_free_cell():
    w = flat_world()
    g = np.array([3.33, 4.44, 0.0])
    np.testing.assert_array_equal(project_goal(g, [1.0, 1.0], w.traversability, 0.1), g)


def test_project_goal_out_of_pillar_toward_robot():
    res = 0.1
    w = flat_world([(5.05, 5.05, 0.42)])
    goal = np.array([5.05, 5.05, 0.0])
    robot = np.array([1.05, 5.05])
    # oracle: cells on the row j=50, from the goal's column stepping west
    j = 50
    oracle_i = next(i for i in range(50, -1, -1) if w.traversability[i, j])
    got = project_goal(goal, robot, w.traversability, res)
    np.testing.assert_allclose(got[:2], [(oracle_i + 0.5) * res, (j + 0.5) * res], atol=1e-12)
    assert oracle_i < 50 - 3


def test_project_goal_falls_back_to_global_nearest():
    res = 0.1
    trav = np.zeros((40, 40), dtype=np.uint8)
    trav[30, 5] = 1
    trav[2, 38] = 1
    goal = np.array([1.05, 1.05, 0.0])
    robot = np.array([3.05, 1.05])
    best = None
    for i in range(40):
        for j in range(40):
            if trav[i, j]:
                d = math.hypot((i + 0.5) * res - goal[0], (j + 0.5) * res - goal[1])
                if best is None or d < best[0]:
                    best = (d, i, j)
    got = project_goal(goal, robot, trav, res)
    np.testing.assert_allclose(got[:2], [(best[1] + 0.5) * res, (best[2] + 0.5) * res], atol=1e-12)


def test_project_goal_without_free_cells():
    with pytest.raises(NoTraversableCellError):
        project_goal([1, 1, 0], [0, 0], np.zeros((5, 5), dtype=np.uint8), 0.1)


# -- walker --------------------------------------------------------------------------

def test_zero_action_keeps_position_and_damps_tilt():
    w = flat_world()
    s = spawn(w, [5.0, 5.0])
    s.roll, s.pitch = 0.1, -0.08
    rng = np.random.default_rng(0)
    x0 = s.xy
    for _ in range(30):
        s, ev = step(s, Action(), w, 0.1, rng)
    np.testing.assert_array_equal(s.xy, x0)
    assert abs(s.roll) < 0.1 * 0.1 and abs(s.pitch) < 0.08 * 0.1
    assert not ev["fall"]


def test_forward_unit_speed_advances_a_tenth():
    w = flat_world()
    s = spawn(w, [5.0, 5.0])
    s2, _ = step(s, Action(1.0, 0, 0), w, 0.1, np.random.default_rng(0), WalkerParams(tau_v=0.0))
    assert s2.x - s.x == pytest.approx(0.1, abs=1e-12)
    assert s2.y == s.y


def test_collision_at_first_penetration_step():
    params = WalkerParams(tau_v=0.0)
    px, r = 3.0, 0.2
    w = flat_world([(px, 5.0, r)])
    s = spawn(w, [1.05, 5.0])
    rng = np.random.default_rng(1)
    # analytic capsule-to-cylinder gap along the approach line
    first = next(k for k in range(1, 40) if (px - (1.05 + 0.1 * k)) - r < params.capsule_radius)
    for k in range(1, first + 1):
        s, ev = step(s, Action(1.0, 0, 0), w, 0.1, rng, params)
        s.roll = s.pitch = s.wx = s.wy = 0.0
        assert ev["collision"] == (k == first)


def test_step_rejects_bad_dt():
    w = flat_world()
    with pytest.raises(ValueError):
        step(spawn(w, [1, 1]), Action(), w, 0.2, np.random.default_rng(0))


def test_walking_into_gap_falls():
    w = flat_world()
    w.elevation[40:45, :] = -1.0
    s = spawn(w, [3.95, 5.0])
    _, ev = step(s, Action(1.0, 0, 0), w, 0.1, np.random.default_rng(0), WalkerParams(tau_v=0.0))
    assert ev["fall"]


def test_rollout_determinism():
    w = generate_world(WorldConfig(families=("slope", "stairs"), pillar_density=0.05, seed=1))
    acts = [Action(0.8, 0.1 * np.sin(k), 0.3 * np.cos(k)) for k in range(40)]

    def run():
        s, rng = spawn(w, [2.0, 2.0]), np.random.default_rng(7)
        out = []
        for a in acts:
            s, ev = step(s, a, w, 0.1, rng)
            out.append((s.to_list(), ev))
        return out

    assert run() == run()


def test_navigation_command_body_frame():
    w = flat_world()
    s = spawn(w, [2.0, 2.0], yaw=math.pi / 2)
    cmd = navigation_command(s, [2.0, 4.0], 20.0)
    np.testing.assert_allclose(cmd.p_xy, [2.0, 0.0], atol=1e-12)
    assert cmd.e_yaw == pytest.approx(0.0) and cmd.remaining == 20.0


@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


# -- rewards and stability -----------------------------------------------------------

@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 30), st.floats(5, 25), st.floats(0.1, 5))
def test_task_reward_bounds(px, py, t, t_max, t_r):
    r = reward_task([px, py], t, t_max, t_r)
    assert 0.0 <= r <= 1.0 / t_r + 1e-15
    if t > t_max - t_r:
        peak = reward_task([0, 0], t, t_max, t_r)
        assert peak == pytest.approx(1.0 / t_r) and peak >= r


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 5))
def test_orientation_reward_bounds(e, w, d):
    r = reward_ori(e, w, d)
    assert 0.0 < r <= 1.0
    if e == w:
        assert r == 1.0
    elif abs(e - w) * d > 1e-12:
        assert r < 1.0


def test_reward_and_stability_argument_checks():
    with pytest.raises(ValueError):
        reward_task([0, 0], 1, 2, 0)
    with pytest.raises(ValueError):
        reward_ori(0, 0, 0)
    with pytest.raises(ValueError):
        stability_metric([0, 0], [0, 0], 0, 1)


@given(st.lists(st.floats(-1, 1), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_stability_in_unit_interval(phi, om):
    s = stability_metric(phi, om, 5.0, 0.5)
    assert 0.0 < s <= 1.0


def test_discounted_return():
    assert discounted_return([1.0, 1.0, 1.0], 0.5) == 1.75


# -- metrics -------------------------------------------------------------------------

def _rec(outcome="success", planned=1.0, xs=(), coll=(), stab=None):
    steps = [{"state": [x, 0.0], "collision": c, "stability": 1.0 if stab is None else stab}
             for x, c in zip(xs, coll or [False] * len(xs))]
    return EpisodeRecord(0, outcome, planned, 0.1, steps, {"start": [0.0, 0.0]})


def test_success_rate():
    recs = [_rec("success" if k < 7 else "timeout", xs=[0.1]) for k in range(10)]
    assert compute_metrics(recs).success == 70.0


def test_traverse_ratio():
    rec = _rec("fall", planned=6.0, xs=[1.0, 2.0, 3.0])
    assert compute_metrics([rec]).traverse == 50.0


def test_traverse_clamped_to_full():
    assert compute_metrics([_rec(planned=1.0, xs=[1.0, 2.0])]).traverse == 100.0


def test_collision_rate():
    coll = [True] * 4 + [False] * 196
    rec = _rec("timeout", xs=[0.0] * 200, coll=coll)
    assert compute_metrics([rec]).collision == pytest.approx(0.2, abs=1e-12)


def test_metrics_reject_empty():
    with pytest.raises(ValueError):
        compute_metrics([])


def test_record_json_round_trip():
    rec = _rec(xs=[0.5, 1.0], stab=0.75)
    back = EpisodeRecord.from_json(rec.to_json())
    assert back == rec
