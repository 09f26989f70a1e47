"""High-level sub-goal generators.

DConductor: a diffusion model over sub-goal arrays (states every K env steps,
optionally carrying the interval actions) plus a return-regression guidance
net whose input gradient steers sampling.  Plans are conditioned by inpainting
the current state into column 0 (and, for goal-reaching tasks, the target
state into the last column).

QConductor: a diffusion proposal policy over next sub-goal states with a
critic trained on K-step reward sums.
"""

import numpy as np

from .actor import DiffusionPolicy
from .data import compute_return, fit_normalizers, subgoal_window_padded
from .diffusion import (DenoiserNet, denoise_loss, embed_steps, make_schedule,
                        q_sample, sample)
from .nets import (Adam, MlpNet, accumulate, load_arrays, net_from_arrays,
                   net_to_arrays, save_arrays)


class GuidanceNet:
    """Scalar return predictor J over noisy planning arrays."""

    EMB_DIM = 16

    def __init__(self, x_dim, rng, hidden=128, depth=3):
        self.x_dim = x_dim
        self.net = MlpNet([x_dim + self.EMB_DIM] + [hidden] * depth + [1], rng)

    def _pack(self, x, m):
        x = np.atleast_2d(x)
        m = np.broadcast_to(np.atleast_1d(m), (x.shape[0],))
        return np.concatenate([x, embed_steps(m, self.EMB_DIM)], axis=1)

    def value(self, x, m):
        return self.net(self._pack(x, m))[:, 0]

    def value_and_input_grad(self, x, m):
        """J values and dJ/dx, for the guided-sampling mean shift."""
        out, cache = self.net.forward(self._pack(x, m))
        _, gin = self.net.backward(cache, np.ones_like(out))
        return out[:, 0], gin[:, :self.x_dim]

    def loss(self, x0, R, m, eps, schedule):
        """Squared regression error against window returns R (constants)."""
        x0 = np.atleast_2d(x0)
        x_m = q_sample(x0, m, eps, schedule)
        out, cache = self.net.forward(self._pack(x_m, m))
        diff = out[:, 0] - np.asarray(R, dtype=np.float64)
        loss = float(np.mean(diff * diff))
        grads, _ = self.net.backward(cache, (2.0 * diff / len(diff))[:, None])
        return loss, grads


class DConductor:
    """Sub-goal diffusion planner with optional return guidance."""

    def __init__(self, d_s, d_a, K, H, state_norm, action_norm, rng,
                 augmented=False, M=100, hidden=128, omega=0.1, gamma=0.99,
                 return_scale=1.0, schedule_kind="cosine"):
        self.d_s = d_s
        self.d_a = d_a
        self.K = K
        self.H = H
        self.augmented = augmented
        self.state_norm = state_norm
        self.action_norm = action_norm
        self.omega = omega
        self.gamma = gamma
        self.return_scale = return_scale
        self.rows = d_s + (K * d_a if augmented else 0)
        self.cols = H + 1
        self.flat_dim = self.rows * self.cols
        self.dnet = DenoiserNet(self.flat_dim, 0, rng, hidden=hidden)
        self.guidance = GuidanceNet(self.flat_dim, rng, hidden=hidden)
        self.schedule_kind = schedule_kind
        self.schedule = make_schedule(M, schedule_kind)

    def window(self, traj, start):
        return subgoal_window_padded(traj, start, self.K, self.H,
                                     self.augmented, self.state_norm,
                                     self.action_norm)

    def _fixed(self, s, goal_state=None):
        mask = np.zeros((self.rows, self.cols))
        values = np.zeros((self.rows, self.cols))
        mask[:self.d_s, 0] = 1.0
        values[:self.d_s, 0] = self.state_norm.normalize(s)
        if goal_state is not None:
            mask[:self.d_s, -1] = 1.0
            values[:self.d_s, -1] = self.state_norm.normalize(goal_state)
        return mask.reshape(1, -1), values.reshape(1, -1)

    def plan_array(self, s, rng, goal_state=None, omega=None):
        """Guided conditional sample, returned as a (rows, H+1) array."""
        w = self.omega if omega is None else omega
        fixed = self._fixed(s, goal_state)
        guidance = self.guidance if w != 0.0 else None
        x = sample(self.dnet, (1, self.flat_dim), self.schedule, rng,
                   guidance=guidance, omega=w, fixed=fixed)
        return x.reshape(self.rows, self.cols)

    def plan_subgoals(self, s, rng, goal_state=None, omega=None):
        """Denormalized sub-goal states for columns 1..H (actions dropped)."""
        arr = self.plan_array(s, rng, goal_state=goal_state, omega=omega)
        return [self.state_norm.denormalize(arr[:self.d_s, h])
                for h in range(1, self.cols)]

    def predict_return(self, x_flat, m=1):
        """Guidance value in raw return units."""
        return self.guidance.value(x_flat, m) / self.return_scale


def train_dconductor(dataset, config, seed=0):
    """Alternating denoiser / guidance updates on sub-goal windows.

    config keys: steps, batch_size, K, H, augmented, M, hidden, lr, omega,
    gamma.  Guidance targets are the discounted window returns, rescaled so
    the largest dataset return maps to ~1.
    """
    rng = np.random.default_rng(seed)
    cfg = {"steps": 4000, "batch_size": 32, "K": 4, "H": 8, "augmented": False,
           "M": 100, "hidden": 128, "lr": 3e-4, "omega": 0.1, "gamma": 0.99,
           "log_every": 100}
    cfg.update(config)
    state_norm, action_norm = fit_normalizers(dataset)
    d_s = dataset[0].states.shape[1]
    d_a = dataset[0].actions.shape[1]
    max_ret = max(abs(compute_return(t, cfg["gamma"])) for t in dataset)
    scale = 1.0 / max(max_ret, 1e-8)
    dc = DConductor(d_s, d_a, cfg["K"], cfg["H"], state_norm, action_norm, rng,
                    augmented=cfg["augmented"], M=cfg["M"], hidden=cfg["hidden"],
                    omega=cfg["omega"], gamma=cfg["gamma"], return_scale=scale)
    opt_d = Adam(dc.dnet.net.params, lr=cfg["lr"])
    opt_g = Adam(dc.guidance.net.params, lr=cfg["lr"])
    window_len = cfg["H"] * cfg["K"]
    history = []
    for step in range(cfg["steps"]):
        rows, rets = [], []
        for _ in range(cfg["batch_size"]):
            traj = dataset[int(rng.integers(len(dataset)))]
            start = int(rng.integers(len(traj)))
            rows.append(dc.window(traj, start).reshape(-1))
            rets.append(compute_return(traj, cfg["gamma"], start, window_len) * scale)
        x0 = np.array(rows)
        dloss, dgrads = denoise_loss(dc.dnet, x0, None, dc.schedule, rng)
        opt_d.step(dgrads)
        m = rng.integers(1, dc.schedule.M + 1, size=len(x0))
        eps = rng.standard_normal(x0.shape)
        gloss, ggrads = dc.guidance.loss(x0, rets, m, eps, dc.schedule)
        opt_g.step(ggrads)
        if not (np.isfinite(dloss) and np.isfinite(gloss)):
            raise FloatingPointError(f"diverged at step {step}")
        if step % cfg["log_every"] == 0 or step == cfg["steps"] - 1:
            history.append({"step": step, "denoise_loss": dloss,
                            "guidance_loss": gloss})
    return dc, history


class QConductor:
    """K-step-ahead sub-goal proposal policy with a TD critic."""

    def __init__(self, d_s, K, state_norm, rng, alpha=1.0, gamma=0.99,
                 M_policy=5, eta=0.005, hidden=128):
        self.d_s = d_s
        self.K = K
        self.state_norm = state_norm
        self.alpha = alpha
        self.gamma = gamma
        self.eta = eta
        self.policy = DiffusionPolicy(d_s, d_s, rng, M=M_policy, hidden=hidden)
        self.critic = MlpNet([2 * d_s] + [hidden] * 3 + [1], rng)
        self.target = self.critic.copy()

    def propose(self, s, rng):
        """Sample a raw sub-goal state for the raw current state s."""
        s_n = np.atleast_2d(self.state_norm.normalize(s))
        g_n = self.policy.sample(s_n, rng)
        return self.state_norm.denormalize(g_n[0])

    def td_loss(self, s_n, g_n, r_k, s_next_n, rng):
        """(R^K + gamma * Q_target(s_{t+K}, proposal) - Q(s_t, s_{t+K}))^2."""
        prop = self.policy.sample(s_next_n, rng)
        q_next = self.target(np.concatenate([s_next_n, prop], axis=1))[:, 0]
        y = r_k + self.gamma * q_next
        q, cache = self.critic.forward(np.concatenate([s_n, g_n], axis=1))
        diff = q[:, 0] - y
        loss = float(np.mean(diff * diff))
        grads, _ = self.critic.backward(cache, (2.0 * diff / len(diff))[:, None])
        return loss, grads

    def improve_loss(self, s_n, rng):
        prop, tape = self.policy.sample_taped(s_n, rng)
        x = np.concatenate([s_n, prop], axis=1)
        q, cache = self.critic.forward(x)
        alpha_hat = self.alpha / max(float(np.mean(np.abs(q))), 1e-4)
        B = len(q)
        _, gin = self.critic.backward(cache, np.full_like(q, -alpha_hat / B))
        grads = self.policy.chain_backward(tape, gin[:, self.d_s:])
        return -alpha_hat * float(np.mean(q)), grads

    def polyak(self):
        for p_t, p_o in zip(self.target.params, self.critic.params):
            p_t *= (1.0 - self.eta)
            p_t += self.eta * p_o


def sample_kstep_batch(dataset, batch_size, K, rng):
    """(s_t, s_{t+K}, R^K = sum of the K interval rewards) rows."""
    lengths = np.array([len(t) for t in dataset])
    ok = np.where(lengths > K)[0]
    if len(ok) == 0:
        raise ValueError(f"no episode longer than K={K}")
    s, g, r = [], [], []
    for _ in range(batch_size):
        traj = dataset[int(ok[rng.integers(len(ok))])]
        t = int(rng.integers(len(traj) - K))
        s.append(traj.states[t])
        g.append(traj.states[t + K])
        r.append(float(np.sum(traj.rewards[t:t + K])))
    return np.array(s), np.array(g), np.array(r)


def train_qconductor(dataset, config, seed=0):
    rng = np.random.default_rng(seed)
    cfg = {"steps": 4000, "batch_size": 64, "K": 4, "alpha": 1.0,
           "gamma": 0.99, "eta": 0.005, "M_policy": 5, "hidden": 128,
           "lr": 3e-4, "log_every": 100}
    cfg.update(config)
    state_norm, _ = fit_normalizers(dataset)
    d_s = dataset[0].states.shape[1]
    qc = QConductor(d_s, cfg["K"], state_norm, rng, alpha=cfg["alpha"],
                    gamma=cfg["gamma"], M_policy=cfg["M_policy"],
                    eta=cfg["eta"], hidden=cfg["hidden"])
    opt_pi = Adam(qc.policy.params, lr=cfg["lr"])
    opt_q = Adam(qc.critic.params, lr=cfg["lr"])
    history = []
    for step in range(cfg["steps"]):
        s, g, r_k = sample_kstep_batch(dataset, cfg["batch_size"], cfg["K"], rng)
        s_n = state_norm.normalize(s)
        g_n = state_norm.normalize(g)
        td, td_grads = qc.td_loss(s_n, g_n, r_k, g_n, rng)
        opt_q.step(td_grads)
        bc, bc_grads = qc.policy.bc_loss(g_n, s_n, rng)
        imp, imp_grads = qc.improve_loss(s_n, rng)
        accumulate(bc_grads, imp_grads)
        opt_pi.step(bc_grads)
        qc.polyak()
        if step % cfg["log_every"] == 0 or step == cfg["steps"] - 1:
            history.append({"step": step, "td_loss": td, "bc_loss": bc,
                            "improve_loss": imp})
    return qc, history


def _norm_arrays(prefix, norm):
    return [(f"{prefix}.lo", norm.lo), (f"{prefix}.hi", norm.hi)]


def _norm_from(prefix, lookup):
    from .data import Normalizer
    n = Normalizer.__new__(Normalizer)
    n.lo = lookup[f"{prefix}.lo"]
    n.hi = lookup[f"{prefix}.hi"]
    return n


def save_dconductor(dc, path):
    meta = {"kind": "dconductor", "d_s": dc.d_s, "d_a": dc.d_a, "K": dc.K,
            "H": dc.H, "augmented": dc.augmented, "M": dc.schedule.M,
            "schedule": dc.schedule_kind,
            "omega": dc.omega, "gamma": dc.gamma,
            "return_scale": dc.return_scale,
            "dnet_sizes": dc.dnet.net.sizes,
            "gnet_sizes": dc.guidance.net.sizes}
    arrays = net_to_arrays("dnet", dc.dnet.net)
    arrays += net_to_arrays("gnet", dc.guidance.net)
    arrays += _norm_arrays("snorm", dc.state_norm) + _norm_arrays("anorm", dc.action_norm)
    save_arrays(path, meta, arrays)


def load_dconductor(path):
    meta, named = load_arrays(path)
    if meta["kind"] != "dconductor":
        raise ValueError(f"checkpoint kind {meta['kind']!r} is not a dconductor")
    lookup = dict(named)
    rng = np.random.default_rng(0)
    dc = DConductor(meta["d_s"], meta["d_a"], meta["K"], meta["H"],
                    _norm_from("snorm", lookup), _norm_from("anorm", lookup),
                    rng, augmented=meta["augmented"], M=meta["M"],
                    hidden=meta["dnet_sizes"][1], omega=meta["omega"],
                    gamma=meta["gamma"], return_scale=meta["return_scale"],
                    schedule_kind=meta["schedule"])
    dc.dnet.net = net_from_arrays("dnet", meta["dnet_sizes"], named)
    dc.guidance.net = net_from_arrays("gnet", meta["gnet_sizes"], named)
    return dc


def save_qconductor(qc, path):
    meta = {"kind": "qconductor", "d_s": qc.d_s, "K": qc.K, "alpha": qc.alpha,
            "gamma": qc.gamma, "eta": qc.eta, "M_policy": qc.policy.schedule.M,
            "policy_sizes": qc.policy.dnet.net.sizes,
            "critic_sizes": qc.critic.sizes}
    arrays = net_to_arrays("policy", qc.policy.dnet.net)
    arrays += net_to_arrays("critic", qc.critic)
    arrays += net_to_arrays("target", qc.target)
    arrays += _norm_arrays("snorm", qc.state_norm)
    save_arrays(path, meta, arrays)


def load_qconductor(path):
    meta, named = load_arrays(path)
    if meta["kind"] != "qconductor":
        raise ValueError(f"checkpoint kind {meta['kind']!r} is not a qconductor")
    lookup = dict(named)
    rng = np.random.default_rng(0)
    qc = QConductor(meta["d_s"], meta["K"], _norm_from("snorm", lookup), rng,
                    alpha=meta["alpha"], gamma=meta["gamma"], eta=meta["eta"],
                    M_policy=meta["M_policy"], hidden=meta["policy_sizes"][1])
    qc.policy.dnet.net = net_from_arrays("policy", meta["policy_sizes"], named)
    qc.critic = net_from_arrays("critic", meta["critic_sizes"], named)
    qc.target = net_from_arrays("target", meta["critic_sizes"], named)
    return qc
