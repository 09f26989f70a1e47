"""Low-level actors: the goal-conditioned diffusion Q-policy and the
segment-diffusion alternative.

The Q-policy (QPerformer) is trained with three couplings per step: a twin
critic regressing one-step TD targets on the combined external + goal-reaching
reward, a noise-prediction behavior-cloning loss, and a Q-maximization term
backpropagated through the short denoising chain.
"""

import numpy as np

from .actor import DiffusionPolicy, TwinCritic
from .data import fit_normalizers, sample_transition_batch
from .diffusion import DenoiserNet, denoise_loss, make_schedule, sample
from .nets import (Adam, accumulate, load_arrays, net_from_arrays,
                   net_to_arrays, save_arrays)


def intrinsic_reward(s_next, s_g, pos_idx=None):
    """Goal-reaching reward exp(-||s_next - s_g||^2).

    With pos_idx the distance is taken over that subvector only (velocity
    components excluded for point-mass states).  Vectorized over rows.
    """
    s_next = np.asarray(s_next, dtype=np.float64)
    s_g = np.asarray(s_g, dtype=np.float64)
    if pos_idx is not None:
        s_next = s_next[..., list(pos_idx)]
        s_g = s_g[..., list(pos_idx)]
    d2 = np.sum((s_next - s_g) ** 2, axis=-1)
    return np.exp(-d2)


class QPerformer:
    """Goal-conditioned diffusion policy with twin TD critics."""

    def __init__(self, d_s, d_a, state_norm, action_norm, rng, alpha=1.0,
                 gamma=0.99, M_policy=5, eta=0.005, hidden=128,
                 pos_idx=(0, 1)):
        self.d_s = d_s
        self.d_a = d_a
        self.state_norm = state_norm
        self.action_norm = action_norm
        self.alpha = alpha
        self.gamma = gamma
        self.eta = eta
        self.pos_idx = tuple(pos_idx)
        self.policy = DiffusionPolicy(d_a, 2 * d_s, rng, M=M_policy, hidden=hidden)
        self.critic = TwinCritic(d_s + d_a + d_s, rng, hidden=hidden)

    def _cond(self, s_n, g_n):
        return np.concatenate([np.atleast_2d(s_n), np.atleast_2d(g_n)], axis=1)

    def policy_sample(self, s, s_g, rng):
        """Sample an executable action for raw state and raw sub-goal."""
        s_n = self.state_norm.normalize(s)
        g_n = self.state_norm.normalize(s_g)
        a_n = self.policy.sample(self._cond(s_n, g_n), rng)
        return np.clip(self.action_norm.denormalize(a_n)[0], -1.0, 1.0)

    def bc_loss(self, s_n, a_n, g_n, rng):
        return self.policy.bc_loss(a_n, self._cond(s_n, g_n), rng)

    def td_loss(self, s_n, a_n, r_total, s_next_n, done, g_n, rng):
        """One-step double-critic TD loss; the target is held constant."""
        cond_next = self._cond(s_next_n, g_n)
        a_next = self.policy.sample(cond_next, rng)
        x_next = np.concatenate([s_next_n, a_next, g_n], axis=1)
        y = r_total + self.gamma * (1.0 - done) * self.critic.target_min(x_next)
        x = np.concatenate([s_n, a_n, g_n], axis=1)
        return self.critic.td_loss(x, y)

    def policy_improve_loss(self, s_n, g_n, rng):
        """-alpha_hat * mean min-critic value of freshly sampled actions.

        alpha_hat = alpha / mean|Q| over the batch, treated as constant.
        Gradients flow through the denoising chain into the policy.
        """
        cond = self._cond(s_n, g_n)
        a0, tape = self.policy.sample_taped(cond, rng)
        x = np.concatenate([s_n, a0, g_n], axis=1)
        q_abs = np.mean(np.abs(self.critic.value_min(x)))
        alpha_hat = self.alpha / max(q_abs, 1e-4)
        q_mean, gx = self.critic.min_value_and_input_grad(x, -alpha_hat)
        g_a0 = gx[:, self.d_s:self.d_s + self.d_a]
        grads = self.policy.chain_backward(tape, g_a0)
        return -alpha_hat * q_mean, grads

    def combined_reward(self, r_ext, s_next, s_g, mode="both"):
        r_intr = intrinsic_reward(s_next, s_g, self.pos_idx)
        if mode == "both":
            return r_ext + r_intr
        if mode == "intr_only":
            return r_intr
        if mode == "ext_only":
            return np.asarray(r_ext, dtype=np.float64)
        raise ValueError(f"unknown reward_mode {mode!r}")


def train_qperformer(dataset, config, seed=0):
    """Alternating critic / policy updates over uniformly sampled transitions.

    config keys (all optional): steps, batch_size, K, p_geom, alpha, gamma,
    eta, M_policy, hidden, lr, reward_mode, goal_mode ("sampled" or "fixed"),
    fixed_goal, pos_idx.  Returns (QPerformer, loss history).
    """
    rng = np.random.default_rng(seed)
    cfg = {"steps": 5000, "batch_size": 64, "K": 4, "p_geom": 0.2,
           "alpha": 1.0, "gamma": 0.99, "eta": 0.005, "M_policy": 5,
           "hidden": 128, "lr": 3e-4, "reward_mode": "both",
           "goal_mode": "sampled", "fixed_goal": None, "pos_idx": (0, 1),
           "log_every": 100}
    cfg.update(config)
    state_norm, action_norm = fit_normalizers(dataset)
    d_s = dataset[0].states.shape[1]
    d_a = dataset[0].actions.shape[1]
    qp = QPerformer(d_s, d_a, state_norm, action_norm, rng, alpha=cfg["alpha"],
                    gamma=cfg["gamma"], M_policy=cfg["M_policy"],
                    eta=cfg["eta"], hidden=cfg["hidden"], pos_idx=cfg["pos_idx"])
    opt_pi = Adam(qp.policy.params, lr=cfg["lr"])
    opts_q = [Adam(net.params, lr=cfg["lr"]) for net in qp.critic.nets]
    history = []
    for step in range(cfg["steps"]):
        batch = sample_transition_batch(dataset, cfg["batch_size"], cfg["K"],
                                        cfg["p_geom"], rng)
        s_g = batch.s_g
        if cfg["goal_mode"] == "fixed":
            s_g = np.broadcast_to(np.asarray(cfg["fixed_goal"], dtype=np.float64),
                                  batch.s.shape).copy()
        r_total = qp.combined_reward(batch.r, batch.s_next, s_g,
                                     cfg["reward_mode"])
        s_n = state_norm.normalize(batch.s)
        a_n = action_norm.normalize(batch.a)
        sn_n = state_norm.normalize(batch.s_next)
        g_n = state_norm.normalize(s_g)

        td, grad_lists = qp.td_loss(s_n, a_n, r_total, sn_n, batch.done, g_n, rng)
        for opt, grads in zip(opts_q, grad_lists):
            opt.step(grads)

        bc, bc_grads = qp.bc_loss(s_n, a_n, g_n, rng)
        imp, imp_grads = qp.policy_improve_loss(s_n, g_n, rng)
        accumulate(bc_grads, imp_grads)
        opt_pi.step(bc_grads)

        qp.critic.polyak(qp.eta)
        if not (np.isfinite(td) and np.isfinite(bc) and np.isfinite(imp)):
            raise FloatingPointError(f"diverged at step {step}")
        if step % cfg["log_every"] == 0 or step == cfg["steps"] - 1:
            history.append({"step": step, "td_loss": td, "bc_loss": bc,
                            "improve_loss": imp})
    return qp, history


class DPerformer:
    """Diffusion model over K-step trajectory segments, steered by inpainting
    the first and last state columns."""

    def __init__(self, d_s, d_a, K, state_norm, action_norm, rng, M=100,
                 hidden=128, schedule_kind="cosine"):
        self.d_s = d_s
        self.d_a = d_a
        self.K = K
        self.state_norm = state_norm
        self.action_norm = action_norm
        self.rows = d_s + d_a
        self.cols = K + 1
        self.dnet = DenoiserNet(self.rows * self.cols, 0, rng, hidden=hidden)
        self.schedule_kind = schedule_kind
        self.schedule = make_schedule(M, schedule_kind)

    def segment(self, traj, start):
        """Normalized (d_s+d_a, K+1) array; pads past the episode end by
        repeating the final state with zero actions."""
        T = len(traj)
        cols = []
        for j in range(self.cols):
            t = start + j
            if t < T:
                col = np.concatenate([self.state_norm.normalize(traj.states[t]),
                                      self.action_norm.normalize(traj.actions[t])])
            else:
                col = np.concatenate([self.state_norm.normalize(traj.states[T - 1]),
                                      np.zeros(self.d_a)])
            cols.append(col)
        return np.stack(cols, axis=1)

    def _fixed(self, s, s_g):
        mask = np.zeros((self.rows, self.cols))
        values = np.zeros((self.rows, self.cols))
        mask[:self.d_s, 0] = 1.0
        values[:self.d_s, 0] = self.state_norm.normalize(s)
        if s_g is not None:
            mask[:self.d_s, -1] = 1.0
            values[:self.d_s, -1] = self.state_norm.normalize(s_g)
        return mask.reshape(1, -1), values.reshape(1, -1)

    def sample_segment(self, s, s_g, rng):
        fixed = self._fixed(s, s_g)
        x = sample(self.dnet, (1, self.rows * self.cols), self.schedule, rng,
                   fixed=fixed)
        return x.reshape(self.rows, self.cols)

    def act(self, s, s_g, rng):
        """First action of a segment inpainted to run from s to s_g."""
        seg = self.sample_segment(s, s_g, rng)
        a_n = seg[self.d_s:, 0]
        return np.clip(self.action_norm.denormalize(a_n), -1.0, 1.0)


def train_dperformer(dataset, config, seed=0):
    """Plain denoising training on K-step segments."""
    rng = np.random.default_rng(seed)
    cfg = {"steps": 4000, "batch_size": 32, "K": 4, "M": 100, "hidden": 128,
           "lr": 3e-4, "log_every": 100}
    cfg.update(config)
    state_norm, action_norm = fit_normalizers(dataset)
    d_s = dataset[0].states.shape[1]
    d_a = dataset[0].actions.shape[1]
    dp = DPerformer(d_s, d_a, cfg["K"], state_norm, action_norm, rng,
                    M=cfg["M"], hidden=cfg["hidden"])
    opt = Adam(dp.dnet.net.params, lr=cfg["lr"])
    history = []
    for step in range(cfg["steps"]):
        rows = []
        for _ in range(cfg["batch_size"]):
            traj = dataset[int(rng.integers(len(dataset)))]
            start = int(rng.integers(len(traj)))
            rows.append(dp.segment(traj, start).reshape(-1))
        loss, grads = denoise_loss(dp.dnet, np.array(rows), None, dp.schedule, rng)
        opt.step(grads)
        if step % cfg["log_every"] == 0 or step == cfg["steps"] - 1:
            history.append({"step": step, "denoise_loss": loss})
    return dp, history


def _norm_arrays(prefix, norm):
    return [(f"{prefix}.lo", norm.lo), (f"{prefix}.hi", norm.hi)]


def _norm_from(prefix, lookup):
    from .data import Normalizer
    n = Normalizer.__new__(Normalizer)
    n.lo = lookup[f"{prefix}.lo"]
    n.hi = lookup[f"{prefix}.hi"]
    return n


def save_qperformer(qp, path):
    meta = {"kind": "qperformer", "d_s": qp.d_s, "d_a": qp.d_a,
            "alpha": qp.alpha, "gamma": qp.gamma, "eta": qp.eta,
            "M_policy": qp.policy.schedule.M, "pos_idx": list(qp.pos_idx),
            "policy_sizes": qp.policy.dnet.net.sizes,
            "critic_sizes": qp.critic.nets[0].sizes}
    arrays = net_to_arrays("policy", qp.policy.dnet.net)
    for i, net in enumerate(qp.critic.nets):
        arrays += net_to_arrays(f"q{i}", net)
    for i, net in enumerate(qp.critic.targets):
        arrays += net_to_arrays(f"qt{i}", net)
    arrays += _norm_arrays("snorm", qp.state_norm) + _norm_arrays("anorm", qp.action_norm)
    save_arrays(path, meta, arrays)


def load_qperformer(path):
    meta, named = load_arrays(path)
    if meta["kind"] != "qperformer":
        raise ValueError(f"checkpoint kind {meta['kind']!r} is not a qperformer")
    lookup = dict(named)
    rng = np.random.default_rng(0)
    qp = QPerformer(meta["d_s"], meta["d_a"], _norm_from("snorm", lookup),
                    _norm_from("anorm", lookup), rng, alpha=meta["alpha"],
                    gamma=meta["gamma"], M_policy=meta["M_policy"],
                    eta=meta["eta"], hidden=meta["policy_sizes"][1],
                    pos_idx=meta["pos_idx"])
    qp.policy.dnet.net = net_from_arrays("policy", meta["policy_sizes"], named)
    qp.critic.nets = [net_from_arrays(f"q{i}", meta["critic_sizes"], named)
                      for i in range(2)]
    qp.critic.targets = [net_from_arrays(f"qt{i}", meta["critic_sizes"], named)
                         for i in range(2)]
    return qp


def save_dperformer(dp, path):
    meta = {"kind": "dperformer", "d_s": dp.d_s, "d_a": dp.d_a, "K": dp.K,
            "M": dp.schedule.M, "schedule": dp.schedule_kind,
            "sizes": dp.dnet.net.sizes}
    arrays = net_to_arrays("dnet", dp.dnet.net)
    arrays += _norm_arrays("snorm", dp.state_norm) + _norm_arrays("anorm", dp.action_norm)
    save_arrays(path, meta, arrays)


def load_dperformer(path):
    meta, named = load_arrays(path)
    if meta["kind"] != "dperformer":
        raise ValueError(f"checkpoint kind {meta['kind']!r} is not a dperformer")
    lookup = dict(named)
    rng = np.random.default_rng(0)
    dp = DPerformer(meta["d_s"], meta["d_a"], meta["K"],
                    _norm_from("snorm", lookup), _norm_from("anorm", lookup),
                    rng, M=meta["M"], hidden=meta["sizes"][1],
                    schedule_kind=meta["schedule"])
    dp.dnet.net = net_from_arrays("dnet", meta["sizes"], named)
    return dp
