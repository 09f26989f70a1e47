"""Closed-form optimality analysis, value-map extraction, and reporting.

The closed-form part works out the two-action single-state MDP: the global
optimizer of the trajectory-diffusion objective reproduces the empirical
action frequencies, so any bounded guidance factor can leave the induced
argmax on the worse action once the data is sufficiently skewed, while
one-step Q-learning picks the better action whenever both are observed.
"""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .diffusion import DenoiserNet, denoise_loss, make_schedule, sample
from .nets import Adam


@dataclass
class Example1Instance:
    """Observation counts and guidance factors for the two-action MDP."""

    n1: int
    n2: int
    g1: float = 1.0
    g2: float = 1.0

    def __post_init__(self):
        if self.n1 < 0 or self.n2 < 0 or self.n1 + self.n2 < 1:
            raise ValueError("need n1 + n2 >= 1 with non-negative counts")
        if not (self.g1 > 0.0 and self.g2 > 0.0 and np.isfinite(self.g1)
                and np.isfinite(self.g2)):
            raise ValueError("guidance factors must be positive and finite")


def example1_diffuser_policy(inst):
    """Guidance-weighted frequency policy (pi(b1), pi(b2)), normalized.

    The optimal diffusion fit reproduces frequencies n_i/(n1+n2); an external
    guidance factor g_i multiplies them.  Normalization is for reporting only;
    the argmax is what matters.
    """
    w1 = inst.n1 / (inst.n1 + inst.n2) * inst.g1
    w2 = inst.n2 / (inst.n1 + inst.n2) * inst.g2
    z = w1 + w2
    return w1 / z, w2 / z


def example1_q_policy(inst):
    """Q-learning's induced action: always b2, given both actions observed."""
    if inst.n1 < 1 or inst.n2 < 1:
        raise ValueError("insufficient coverage: need n1 >= 1 and n2 >= 1")
    return "b2"


def example1_flip_threshold(g1, g2):
    """Count ratio n1/n2 above which the diffuser-induced argmax flips to b1."""
    if g1 <= 0.0:
        raise ValueError("g1 must be > 0")
    return g2 / g1


def train_two_category_model(n1, n2, seed=0, steps=4000, M=100, hidden=96,
                             lr=1e-3, batch_size=64):
    """Fit a 1-D diffusion model to n1 copies of -0.5 and n2 copies of +0.5.

    Uses the cosine schedule: at small M the linear beta range leaves
    alpha_bar[M] far from zero, and the N(0,1) sampling init then biases
    mixture frequencies toward balance.
    """
    rng = np.random.default_rng(seed)
    data = np.concatenate([np.full(n1, -0.5), np.full(n2, 0.5)])
    dnet = DenoiserNet(1, 0, rng, hidden=hidden, depth=3)
    schedule = make_schedule(M, "cosine")
    opt = Adam(dnet.net.params, lr=lr)
    for _ in range(steps):
        x0 = rng.choice(data, size=batch_size)[:, None]
        _, grads = denoise_loss(dnet, x0, None, schedule, rng)
        opt.step(grads)
    return dnet, schedule


class CategoryGuidance:
    """Linear preference g(x) = bias * x, pushing samples toward +0.5."""

    def __init__(self, bias):
        self.bias = bias

    def value_and_input_grad(self, x, m):
        x = np.atleast_2d(x)
        return self.bias * x[:, 0], np.full_like(x, self.bias)


def example1_empirical_check(inst, seed=0, n_samples=10_000, steps=4000,
                             guidance_bias=0.0):
    """Sample frequencies of a trained 2-category model vs n_i/(n1+n2)."""
    dnet, schedule = train_two_category_model(inst.n1, inst.n2, seed=seed,
                                              steps=steps)
    rng = np.random.default_rng(seed + 1)
    guidance = CategoryGuidance(guidance_bias) if guidance_bias else None
    xs = sample(dnet, (n_samples, 1), schedule, rng, guidance=guidance,
                omega=1.0 if guidance else 0.0)
    freq_b2 = float(np.mean(xs[:, 0] > 0.0))
    expected_b1 = inst.n1 / (inst.n1 + inst.n2)
    return {
        "n1": inst.n1, "n2": inst.n2,
        "freq_b1": 1.0 - freq_b2, "freq_b2": freq_b2,
        "expected_b1": expected_b1, "expected_b2": 1.0 - expected_b1,
        "abs_error": abs((1.0 - freq_b2) - expected_b1),
    }


COMPASS = np.array([[1, 0], [-1, 0], [0, 1], [0, -1],
                    [1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64)
COMPASS /= np.linalg.norm(COMPASS, axis=1, keepdims=True)


def _grid_centers(env, resolution):
    xmin, ymin, xmax, ymax = env.bounds
    xs = xmin + (np.arange(resolution) + 0.5) * (xmax - xmin) / resolution
    ys = ymin + (np.arange(resolution) + 0.5) * (ymax - ymin) / resolution
    return xs, ys


@dataclass
class ValueGrid:
    values: np.ndarray   # (resolution, resolution), row = y index
    source: str
    resolution: int

    def write_csv(self, path):
        np.savetxt(path, self.values, delimiter=",")


def extract_value_grid(source, env, resolution, model=None, gamma=0.99,
                       goal_state=None):
    """Per-cell scalar values over the env bounds.

    sources: diffuser_guidance (J at the least-noisy step on a plan padded
    with the cell state), q_critic (max over 8 compass unit actions), and
    optimal_oracle (discounted dense reward of the straight-to-goal
    controller).
    """
    xs, ys = _grid_centers(env, resolution)
    if goal_state is None:
        goal_state = env.goal_state
    vals = np.zeros((resolution, resolution))
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            state = np.array([x, y, 0.0, 0.0])
            if source == "optimal_oracle":
                vals[iy, ix] = _oracle_value(env, state, gamma)
            elif source == "q_critic":
                vals[iy, ix] = _critic_value(model, state, goal_state)
            elif source == "diffuser_guidance":
                vals[iy, ix] = _guidance_value(model, state)
            else:
                raise ValueError(f"unknown value source {source!r}")
    return ValueGrid(values=vals, source=source, resolution=resolution)


def _oracle_value(env, state, gamma):
    """Discounted dense return of heading straight to the goal at max speed."""
    pos = state[:2].copy()
    total = 0.0
    disc = 1.0
    for _ in range(env.episode_len):
        d = env._goal - pos
        dist = np.linalg.norm(d)
        step = min(env.max_speed, dist)
        if dist > 1e-9:
            pos = pos + d / dist * step
        total += disc * np.exp(-np.sum((pos - env._goal) ** 2))
        disc *= gamma
    return total


def _critic_value(qp, state, goal_state):
    s_n = qp.state_norm.normalize(state)
    g_n = qp.state_norm.normalize(goal_state)
    a_n = qp.action_norm.normalize(COMPASS)
    x = np.concatenate([np.tile(s_n, (len(COMPASS), 1)), a_n,
                        np.tile(g_n, (len(COMPASS), 1))], axis=1)
    return float(np.max(qp.critic.value_min(x)))


def _guidance_value(dc, state):
    s_n = dc.state_norm.normalize(state)
    arr = np.zeros((dc.rows, dc.cols))
    arr[:dc.d_s, :] = s_n[:, None]   # length-1 padding: repeat the cell state
    return float(dc.guidance.value(arr.reshape(1, -1), 1)[0])


def spearman(a, b):
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ra = _avg_rank(a)
    rb = _avg_rank(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    return float(np.sum(ra * rb) / denom) if denom > 0 else 0.0


def _avg_rank(x):
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j)
        i = j + 1
    return ranks


def emit_report(results, out_dir):
    """CSV per table plus a JSON manifest; grids as CSV matrices.

    ``results`` maps experiment name -> either a list of row dicts or a
    ValueGrid.  Returns the list of written files.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    for name, payload in sorted(results.items()):
        path = os.path.join(out_dir, f"{name}.csv")
        if isinstance(payload, ValueGrid):
            payload.write_csv(path)
            manifest.append({"name": name, "file": f"{name}.csv",
                             "kind": "grid", "source": payload.source,
                             "resolution": payload.resolution})
        else:
            with open(path, "w", newline="") as f:
                if payload:
                    w = csv.DictWriter(f, fieldnames=list(payload[0].keys()))
                    w.writeheader()
                    w.writerows(payload)
            manifest.append({"name": name, "file": f"{name}.csv",
                             "kind": "table", "rows": len(payload)})
    mpath = os.path.join(out_dir, "manifest.json")
    with open(mpath, "w") as f:
        json.dump({"entries": manifest}, f, indent=2, sort_keys=True)
    return [e["file"] for e in manifest] + ["manifest.json"]
