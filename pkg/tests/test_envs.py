import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plandq.envs import (PointMassEnv, ToyMdp, _seg_intersect_t,
                         env_from_config, open_maze, scripted_collect, u_maze,
                         u_maze_waypoints)


def test_toy_mdp_rewards():
    mdp = ToyMdp(reward_b1=0.5, reward_b2=1.0)
    assert mdp.step("b1").reward == 0.5
    assert mdp.step("b2").reward == 1.0
    assert not mdp.step("b2").done


def test_toy_mdp_rejects_bad_ordering():
    with pytest.raises(ValueError):
        ToyMdp(reward_b1=1.0, reward_b2=0.5)
    with pytest.raises(ValueError):
        ToyMdp(reward_b1=-0.1, reward_b2=1.0)


def test_toy_mdp_rejects_unknown_action():
    with pytest.raises(ValueError):
        ToyMdp().step("b3")


def test_seg_intersect_crossing():
    t = _seg_intersect_t(np.array([0.0, 0.0]), np.array([2.0, 0.0]),
                         np.array([1.0, -1.0]), np.array([1.0, 1.0]))
    assert np.isclose(t, 0.5)


def test_seg_intersect_parallel_none():
    t = _seg_intersect_t(np.array([0.0, 0.0]), np.array([2.0, 0.0]),
                         np.array([0.0, 1.0]), np.array([2.0, 1.0]))
    assert t is None


def test_seg_intersect_disjoint_none():
    t = _seg_intersect_t(np.array([0.0, 0.0]), np.array([0.5, 0.0]),
                         np.array([1.0, -1.0]), np.array([1.0, 1.0]))
    assert t is None


def test_open_maze_dense_reward_peak_at_goal():
    env = open_maze()
    at_goal = np.array([4.0, 4.0, 0.0, 0.0])
    res = env.step(at_goal, np.zeros(2))
    assert np.isclose(res.reward, 1.0)
    far = np.array([0.5, 0.5, 0.0, 0.0])
    assert env.step(far, np.zeros(2)).reward < 0.01


def test_step_clips_action_to_max_speed():
    env = open_maze()
    s = np.array([4.0, 4.0, 0.0, 0.0])
    res = env.step(s, np.array([100.0, 0.0]))
    assert np.isclose(res.next_state[0], 4.0 + env.max_speed)


def test_step_velocity_is_displacement():
    env = open_maze()
    s = np.array([2.0, 2.0, 0.0, 0.0])
    res = env.step(s, np.array([1.0, -0.5]))
    assert np.allclose(res.next_state[2:], res.next_state[:2] - s[:2])


def test_step_rejects_nonfinite_action():
    env = open_maze()
    with pytest.raises(ValueError):
        env.step(np.zeros(4), np.array([np.nan, 0.0]))


def test_bounds_clamp():
    env = open_maze()
    s = np.array([0.1, 4.0, 0.0, 0.0])
    res = env.step(s, np.array([-1.0, 0.0]))
    assert res.next_state[0] >= 0.0


@given(st.floats(min_value=0.5, max_value=7.5),
       st.floats(min_value=0.5, max_value=7.5),
       st.floats(min_value=-1.0, max_value=1.0),
       st.floats(min_value=-1.0, max_value=1.0))
@settings(max_examples=200, deadline=None)
def test_step_never_leaves_box(x, y, ax, ay):
    env = open_maze()
    res = env.step(np.array([x, y, 0.0, 0.0]), np.array([ax, ay]))
    nx, ny = res.next_state[:2]
    assert 0.0 <= nx <= 8.0 and 0.0 <= ny <= 8.0


def _wall_side(p, x1, y1, x2, y2):
    return np.sign((x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1))


@given(st.floats(min_value=0.5, max_value=7.5),
       st.floats(min_value=0.5, max_value=7.5),
       st.floats(min_value=-1.0, max_value=1.0),
       st.floats(min_value=-1.0, max_value=1.0))
@settings(max_examples=200, deadline=None)
def test_step_never_crosses_u_wall(x, y, ax, ay):
    env = u_maze()
    s = np.array([x, y, 0.0, 0.0])
    res = env.step(s, np.array([ax, ay]))
    p, q = s[:2], res.next_state[:2]
    for (x1, y1, x2, y2) in env.walls:
        t = _seg_intersect_t(p, q, np.array([x1, y1]), np.array([x2, y2]))
        # crossing is only legal exactly at the endpoint clamp
        if t is not None:
            side_p = _wall_side(p, x1, y1, x2, y2)
            side_q = _wall_side(q, x1, y1, x2, y2)
            assert side_p * side_q >= 0.0


def test_wall_blocks_straight_line():
    env = u_maze()
    s = np.array([6.5, 4.0, 0.0, 0.0])   # just right of the U's right wall
    res = env.step(s, np.array([-1.0, 0.0]))
    # repeated pushes left must never pass x = 6
    for _ in range(10):
        res = env.step(res.next_state, np.array([-1.0, 0.0]))
    assert res.next_state[0] >= 6.0 - 1e-9


def test_sparse_goal_terminates():
    env = u_maze()
    s = np.array([4.0, 4.2, 0.0, 0.0])
    res = env.step(s, np.array([0.0, -1.0]))
    assert res.reward == 1.0 and res.done


def test_sparse_outside_radius_zero_reward():
    env = u_maze()
    s = np.array([1.0, 1.0, 0.0, 0.0])
    res = env.step(s, np.array([0.1, 0.1]))
    assert res.reward == 0.0 and not res.done


def test_reset_deterministic():
    env = open_maze()
    s1 = env.reset(np.random.default_rng(3))
    s2 = env.reset(np.random.default_rng(3))
    assert np.array_equal(s1, s2)
    assert np.all(s1[2:] == 0.0)


def test_reset_with_start():
    env = open_maze()
    s = env.reset(np.random.default_rng(0), start=(1.0, 2.0))
    assert np.allclose(s, [1.0, 2.0, 0.0, 0.0])


def test_goal_state_vector():
    env = open_maze()
    assert np.allclose(env.goal_state, [4.0, 4.0, 0.0, 0.0])


def test_scripted_uniform_random_shapes():
    env = open_maze()
    trajs = scripted_collect(env, "uniform_random", 3, seed=0)
    assert len(trajs) == 3
    for t in trajs:
        assert len(t) == env.episode_len
        assert t.states.shape == (100, 4) and t.actions.shape == (100, 2)
        assert not t.terminal


def test_scripted_collect_deterministic():
    env = open_maze()
    a = scripted_collect(env, "uniform_random", 2, seed=7)
    b = scripted_collect(env, "uniform_random", 2, seed=7)
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.states, tb.states)


def test_goal_avoider_stays_away_from_goal():
    env = open_maze()
    trajs = scripted_collect(env, "random_goal_avoider", 5, seed=1,
                             exclusion_radius=2.0)
    # positions can pass through the exclusion zone in transit, but the
    # controller should not settle there: mean occupancy stays low
    close = np.concatenate(
        [np.linalg.norm(t.states[:, :2] - [4.0, 4.0], axis=1) < 1.0
         for t in trajs])
    assert close.mean() < 0.25


def test_goal_avoider_rejects_total_exclusion():
    env = open_maze()
    with pytest.raises(ValueError):
        scripted_collect(env, "random_goal_avoider", 1, seed=0,
                         exclusion_radius=100.0)


def test_waypoint_expert_solves_u_maze():
    env = u_maze()
    trajs = scripted_collect(env, "waypoint_expert", 10, seed=100)
    # terminal=True means the sparse goal fired
    succ = sum(int(t.terminal) for t in trajs)
    assert succ >= 8


def test_u_maze_waypoints_inside_direct():
    assert u_maze_waypoints(np.array([4.0, 4.5])) == []


def test_u_maze_waypoints_outside_routes_left():
    wps = u_maze_waypoints(np.array([7.0, 4.0]))
    assert wps and wps[-1] == (1.0, 4.0)


def test_scripted_rejects_unknown_policy():
    with pytest.raises(ValueError):
        scripted_collect(open_maze(), "nonsense", 1, seed=0)


def test_scripted_rejects_zero_episodes():
    with pytest.raises(ValueError):
        scripted_collect(open_maze(), "uniform_random", 0, seed=0)


def test_env_from_config_kinds():
    env = env_from_config({"kind": "u_maze"})
    assert env.reward_mode == "sparse_goal" and len(env.walls) == 3
    env = env_from_config({"kind": "open_maze", "episode_len": 50})
    assert env.episode_len == 50 and env.walls == []


def test_env_from_config_rejects_unknown_key():
    with pytest.raises(ValueError):
        env_from_config({"kind": "open_maze", "velocity": 3})


def test_env_from_config_rejects_unknown_kind():
    with pytest.raises(ValueError):
        env_from_config({"kind": "spiral_maze"})


def test_env_from_config_rejects_goal_outside_bounds():
    with pytest.raises(ValueError):
        env_from_config({"kind": "pointmass", "goal": [9.0, 9.0]})
