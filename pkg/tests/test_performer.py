import numpy as np
import pytest

from plandq.data import Trajectory, fit_normalizers
from plandq.performer import (DPerformer, QPerformer, intrinsic_reward,
                              load_dperformer, load_qperformer,
                              save_dperformer, save_qperformer,
                              train_dperformer, train_qperformer)


def constant_dataset(r=0.5, episodes=4, T=50, seed=0):
    """States random-walk in 1-D, constant reward every step."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(episodes):
        a = rng.uniform(-1, 1, (T, 1))
        s = np.cumsum(0.05 * a, axis=0)
        out.append(Trajectory(states=s, actions=a, rewards=np.full(T, r)))
    return out


def point_dataset(episodes=3, T=40, seed=1):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(episodes):
        a = rng.uniform(-1, 1, (T, 2))
        pos = 4.0 + np.cumsum(0.25 * a, axis=0)
        s = np.concatenate([pos, np.vstack([np.zeros((1, 2)), np.diff(pos, axis=0)])], axis=1)
        r = np.exp(-np.sum((pos - 4.0) ** 2, axis=1))
        out.append(Trajectory(states=s, actions=a, rewards=r))
    return out


def test_intrinsic_reward_peaks_at_goal():
    g = np.array([1.0, 2.0, 0.0, 0.0])
    assert intrinsic_reward(g, g) == 1.0


def test_intrinsic_reward_closed_form():
    s = np.array([1.0, 0.0])
    g = np.array([0.0, 0.0])
    assert np.isclose(intrinsic_reward(s, g), np.exp(-1.0))


def test_intrinsic_reward_pos_idx_ignores_velocity():
    s = np.array([1.0, 2.0, 9.0, -9.0])
    g = np.array([1.0, 2.0, 0.0, 0.0])
    assert intrinsic_reward(s, g, pos_idx=(0, 1)) == 1.0
    assert intrinsic_reward(s, g) < 1.0


def test_intrinsic_reward_vectorized():
    s = np.array([[0.0, 0.0], [1.0, 0.0]])
    g = np.zeros((2, 2))
    r = intrinsic_reward(s, g)
    assert r.shape == (2,)
    assert np.allclose(r, [1.0, np.exp(-1.0)])


def make_qp(seed=0, d_s=2, d_a=2):
    rng = np.random.default_rng(seed)
    data = np.vstack([rng.uniform(-2, 2, (20, d_s + d_a))])
    trajs = [Trajectory(states=data[:, :d_s], actions=np.clip(data[:, d_s:], -1, 1),
                        rewards=np.zeros(20))]
    snorm, anorm = fit_normalizers(trajs)
    return QPerformer(d_s, d_a, snorm, anorm, rng, hidden=16)


def test_combined_reward_modes():
    qp = make_qp()
    r_ext = np.array([0.25])
    s_next = np.array([[0.0, 0.0]])
    s_g = np.array([[0.0, 0.0]])
    both = qp.combined_reward(r_ext, s_next, s_g, "both")
    intr = qp.combined_reward(r_ext, s_next, s_g, "intr_only")
    ext = qp.combined_reward(r_ext, s_next, s_g, "ext_only")
    assert np.isclose(intr[0], 1.0)
    assert np.isclose(ext[0], 0.25)
    assert np.isclose(both[0], 1.25)
    with pytest.raises(ValueError):
        qp.combined_reward(r_ext, s_next, s_g, "bogus")


def test_policy_sample_in_action_range():
    qp = make_qp()
    rng = np.random.default_rng(1)
    a = qp.policy_sample(np.array([0.3, -0.3]), np.array([1.0, 1.0]), rng)
    assert a.shape == (2,)
    assert np.all(a >= -1.0) and np.all(a <= 1.0)


def test_train_qperformer_smoke_and_history():
    data = point_dataset()
    qp, hist = train_qperformer(data, {"steps": 12, "hidden": 16,
                                       "log_every": 5}, seed=0)
    assert qp.pos_idx == (0, 1)
    steps = [h["step"] for h in hist]
    assert steps == [0, 5, 10, 11]
    for h in hist:
        assert np.isfinite(h["td_loss"]) and np.isfinite(h["bc_loss"])


def test_train_qperformer_deterministic():
    data = point_dataset()
    qp1, h1 = train_qperformer(data, {"steps": 8, "hidden": 16}, seed=3)
    qp2, h2 = train_qperformer(data, {"steps": 8, "hidden": 16}, seed=3)
    for a, b in zip(qp1.policy.params, qp2.policy.params):
        assert np.array_equal(a, b)
    assert h1 == h2


def test_train_qperformer_fixed_goal_mode():
    data = point_dataset()
    qp, _ = train_qperformer(data, {"steps": 5, "hidden": 16,
                                    "goal_mode": "fixed",
                                    "fixed_goal": [4.0, 4.0, 0.0, 0.0],
                                    "reward_mode": "ext_only"}, seed=0)
    rng = np.random.default_rng(0)
    a = qp.policy_sample(data[0].states[0], np.array([4.0, 4.0, 0.0, 0.0]), rng)
    assert np.all(np.isfinite(a))


def test_td_converges_to_constant_reward_fixed_point():
    # single effective state, constant reward 0.5, gamma 0.9: Q* = 5
    data = constant_dataset(r=0.5)
    qp, _ = train_qperformer(
        data,
        {"steps": 2500, "hidden": 32, "lr": 1e-3, "eta": 0.05, "gamma": 0.9,
         "alpha": 0.0, "reward_mode": "ext_only", "goal_mode": "fixed",
         "fixed_goal": [0.0], "batch_size": 32, "pos_idx": (0,)},
        seed=0)
    rng = np.random.default_rng(5)
    s_n = qp.state_norm.normalize(np.zeros((1, 1)))
    g_n = qp.state_norm.normalize(np.zeros((1, 1)))
    a_n = qp.policy.sample(qp._cond(s_n, g_n), rng)
    q = qp.critic.value_min(np.concatenate([s_n, a_n, g_n], axis=1))
    assert abs(float(q[0]) - 5.0) < 0.5


def test_qperformer_checkpoint_roundtrip(tmp_path):
    data = point_dataset()
    qp, _ = train_qperformer(data, {"steps": 5, "hidden": 16}, seed=1)
    path = tmp_path / "qp.ckpt"
    save_qperformer(qp, path)
    qp2 = load_qperformer(path)
    s = data[0].states[3]
    g = data[0].states[10]
    a1 = qp.policy_sample(s, g, np.random.default_rng(9))
    a2 = qp2.policy_sample(s, g, np.random.default_rng(9))
    assert np.array_equal(a1, a2)
    x = np.random.default_rng(2).standard_normal((3, 2 * 4 + 2))
    assert np.allclose(qp.critic.value_min(x), qp2.critic.value_min(x))


def test_load_qperformer_rejects_wrong_kind(tmp_path):
    data = point_dataset()
    dp, _ = train_dperformer(data, {"steps": 2, "hidden": 16, "M": 10}, seed=0)
    path = tmp_path / "dp.ckpt"
    save_dperformer(dp, path)
    with pytest.raises(ValueError):
        load_qperformer(path)


def test_dperformer_segment_layout():
    data = point_dataset()
    snorm, anorm = fit_normalizers(data)
    dp = DPerformer(4, 2, 4, snorm, anorm, np.random.default_rng(0), M=10,
                    hidden=16)
    seg = dp.segment(data[0], 0)
    assert seg.shape == (6, 5)
    assert np.allclose(seg[:4, 0], snorm.normalize(data[0].states[0]))
    assert np.allclose(seg[4:, 2], anorm.normalize(data[0].actions[2]))


def test_dperformer_segment_pads_past_end():
    data = point_dataset(T=10)
    snorm, anorm = fit_normalizers(data)
    dp = DPerformer(4, 2, 4, snorm, anorm, np.random.default_rng(0), M=10,
                    hidden=16)
    seg = dp.segment(data[0], 8)
    assert np.allclose(seg[:4, -1], snorm.normalize(data[0].states[-1]))
    assert np.allclose(seg[4:, -1], 0.0)


def test_dperformer_inpaints_endpoints():
    data = point_dataset()
    dp, _ = train_dperformer(data, {"steps": 2, "hidden": 16, "M": 10}, seed=0)
    s = data[0].states[0]
    s_g = data[0].states[8]
    seg = dp.sample_segment(s, s_g, np.random.default_rng(1))
    assert np.allclose(seg[:4, 0], dp.state_norm.normalize(s))
    assert np.allclose(seg[:4, -1], dp.state_norm.normalize(s_g))


def test_dperformer_act_shape_and_range():
    data = point_dataset()
    dp, _ = train_dperformer(data, {"steps": 2, "hidden": 16, "M": 10}, seed=0)
    a = dp.act(data[0].states[0], data[0].states[5], np.random.default_rng(2))
    assert a.shape == (2,)
    assert np.all(np.abs(a) <= 1.0)


def test_train_dperformer_loss_decreases():
    data = point_dataset()
    dp, hist = train_dperformer(data, {"steps": 300, "hidden": 32, "M": 20},
                                seed=0)
    assert hist[-1]["denoise_loss"] < hist[0]["denoise_loss"]


def test_dperformer_checkpoint_roundtrip(tmp_path):
    data = point_dataset()
    dp, _ = train_dperformer(data, {"steps": 2, "hidden": 16, "M": 10}, seed=0)
    path = tmp_path / "dp.ckpt"
    save_dperformer(dp, path)
    dp2 = load_dperformer(path)
    s, g = data[0].states[0], data[0].states[6]
    a1 = dp.act(s, g, np.random.default_rng(4))
    a2 = dp2.act(s, g, np.random.default_rng(4))
    assert np.array_equal(a1, a2)
    assert dp2.schedule_kind == dp.schedule_kind
