"""Offline dataset storage, normalization, and sub-goal sampling."""

import json
from dataclasses import dataclass

import numpy as np

DATASET_VERSION = 1


@dataclass
class Trajectory:
    """One episode: states (T, d_s), actions (T, d_a), rewards (T,)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        T = len(self.states)
        if len(self.actions) != T or len(self.rewards) != T:
            raise ValueError("states/actions/rewards length mismatch")
        for arr in (self.states, self.actions, self.rewards):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite trajectory entries")

    def __len__(self):
        return len(self.states)


def save_dataset(trajs, path):
    """One JSON header line, then per-episode f32-LE blocks.

    Block order per episode: states, actions, rewards.  Terminal flags live in
    the header.
    """
    if trajs:
        d_s = trajs[0].states.shape[1]
        d_a = trajs[0].actions.shape[1]
    else:
        d_s = d_a = 0
    header = {
        "version": DATASET_VERSION,
        "d_s": d_s,
        "d_a": d_a,
        "episodes": len(trajs),
        "lengths": [len(t) for t in trajs],
        "terminals": [bool(t.terminal) for t in trajs],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        for t in trajs:
            f.write(np.ascontiguousarray(t.states, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(t.actions, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(t.rewards, dtype="<f4").tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("version") != DATASET_VERSION:
            raise ValueError("dataset version mismatch")
        d_s, d_a = header["d_s"], header["d_a"]
        trajs = []
        for T, term in zip(header["lengths"], header["terminals"]):
            need = 4 * T * (d_s + d_a + 1)
            buf = f.read(need)
            if len(buf) != need:
                raise ValueError("truncated dataset payload")
            flat = np.frombuffer(buf, dtype="<f4").astype(np.float64)
            s = flat[:T * d_s].reshape(T, d_s)
            a = flat[T * d_s:T * (d_s + d_a)].reshape(T, d_a)
            r = flat[T * (d_s + d_a):]
            trajs.append(Trajectory(states=s, actions=a, rewards=r, terminal=term))
        if f.read(1):
            raise ValueError("trailing bytes in dataset")
    return trajs


class Normalizer:
    """Per-dimension min-max map onto [-1, 1]."""

    def __init__(self, data, eps=1e-6):
        data = np.asarray(data, dtype=np.float64)
        self.lo = data.min(axis=0)
        self.hi = data.max(axis=0)
        flat = self.hi - self.lo < eps
        self.lo = np.where(flat, self.lo - eps, self.lo)
        self.hi = np.where(flat, self.hi + eps, self.hi)

    def normalize(self, x):
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, z):
        return (np.asarray(z, dtype=np.float64) + 1.0) * 0.5 * (self.hi - self.lo) + self.lo


def fit_normalizers(trajs):
    """(state normalizer, action normalizer) over a whole dataset."""
    states = np.concatenate([t.states for t in trajs])
    actions = np.concatenate([t.actions for t in trajs])
    return Normalizer(states), Normalizer(actions)


def make_subgoal_array(traj, start, K, H, augmented, state_norm, action_norm=None):
    """Sub-goal planning array from one trajectory window.

    Column h holds the normalized state at env step ``start + h*K``; in the
    augmented form each column additionally stacks the K normalized actions of
    that column's interval.  Shape (d_s [+ K*d_a], H+1).
    """
    if K < 1 or H < 1:
        raise ValueError("K and H must be >= 1")
    T = len(traj)
    last = start + H * K + (K - 1 if augmented else 0)
    if start < 0 or last >= T:
        raise ValueError("sub-goal window out of range")
    cols = []
    for h in range(H + 1):
        t = start + h * K
        col = [state_norm.normalize(traj.states[t])]
        if augmented:
            for j in range(K):
                col.append(action_norm.normalize(traj.actions[t + j]))
        cols.append(np.concatenate(col))
    return np.stack(cols, axis=1)


def subgoal_window_padded(traj, start, K, H, augmented, state_norm, action_norm=None):
    """Like make_subgoal_array but pads past episode end.

    Steps beyond the last recorded state repeat the final state with zero
    actions, keeping array shapes fixed.
    """
    T = len(traj)
    cols = []
    for h in range(H + 1):
        t = start + h * K
        s = traj.states[min(t, T - 1)]
        col = [state_norm.normalize(s)]
        if augmented:
            for j in range(K):
                tj = t + j
                if tj < T:
                    col.append(action_norm.normalize(traj.actions[tj]))
                else:
                    col.append(np.zeros(traj.actions.shape[1]))
        cols.append(np.concatenate(col))
    return np.stack(cols, axis=1)


def sample_subgoal_index(t, K, p, episode_len, rng):
    """Index of a sub-goal for state index t: uniform on [t, min(t + D*K, T-1)]
    with D ~ Geometric(p) on {1, 2, ...}."""
    if not (0.0 < p <= 1.0):
        raise ValueError("p must be in (0, 1]")
    delta = rng.geometric(p)
    hi = min(t + delta * K, episode_len - 1)
    return int(rng.integers(t, hi + 1))


@dataclass
class TransitionBatch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    s_g: np.ndarray


def sample_transition_batch(trajs, batch_size, K, p, rng):
    """Uniform transitions with per-row sub-goals drawn geometrically ahead.

    The last index of a non-terminal episode bootstraps from itself; terminal
    rows carry done=1.
    """
    if not trajs:
        raise ValueError("empty dataset")
    lengths = np.array([len(t) for t in trajs])
    cum = np.cumsum(lengths)
    total = cum[-1]
    rows_s, rows_a, rows_r, rows_sn, rows_d, rows_g = [], [], [], [], [], []
    for _ in range(batch_size):
        flat = int(rng.integers(total))
        ep = int(np.searchsorted(cum, flat, side="right"))
        t = flat - (cum[ep - 1] if ep > 0 else 0)
        traj = trajs[ep]
        T = len(traj)
        rows_s.append(traj.states[t])
        rows_a.append(traj.actions[t])
        rows_r.append(traj.rewards[t])
        rows_sn.append(traj.states[t + 1] if t + 1 < T else traj.states[t])
        rows_d.append(1.0 if (traj.terminal and t == T - 1) else 0.0)
        g = sample_subgoal_index(t, K, p, T, rng)
        rows_g.append(traj.states[g])
    return TransitionBatch(
        s=np.array(rows_s), a=np.array(rows_a), r=np.array(rows_r),
        s_next=np.array(rows_sn), done=np.array(rows_d), s_g=np.array(rows_g))


def compute_return(traj, gamma, start=0, length=None):
    """Discounted return sum_t gamma^t r_t over the sampled window."""
    r = traj.rewards[start:start + length if length is not None else None]
    return float(np.sum(r * gamma ** np.arange(len(r))))
