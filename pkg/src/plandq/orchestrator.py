"""Agent wiring and receding-horizon evaluation.

The four hierarchical variants pair a conductor kind with a performer kind
(first letter = conductor, second = performer).  Flat reference agents back
the analysis experiments.
"""

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .conductor import DConductor, QConductor
from .envs import u_maze_waypoints
from .performer import DPerformer, QPerformer

VARIANT_KINDS = {
    "PlanDQ": (DConductor, QPerformer),
    "PlanDD": (DConductor, DPerformer),
    "PlanQD": (QConductor, DPerformer),
    "PlanQQ": (QConductor, QPerformer),
}


@dataclass
class AgentBundle:
    """A wired (conductor, performer) pair with a replan cadence."""

    variant: str
    conductor: object
    performer: object
    replan_every: int
    goal_state: object = None   # inpainted into the plan's last column if set
    _g1: object = field(default=None, repr=False)

    def reset(self):
        self._g1 = None

    def act(self, s, step_counter, rng):
        if self._g1 is None or step_counter % self.replan_every == 0:
            if isinstance(self.conductor, DConductor):
                subgoals = self.conductor.plan_subgoals(
                    s, rng, goal_state=self.goal_state)
                self._g1 = subgoals[0]
            else:
                self._g1 = self.conductor.propose(s, rng)
        if isinstance(self.performer, QPerformer):
            return self.performer.policy_sample(s, self._g1, rng)
        return self.performer.act(s, self._g1, rng)


def build_agent(variant, conductor, performer, replan_every=None,
                goal_state=None):
    if variant not in VARIANT_KINDS:
        raise ValueError(f"unknown variant {variant!r}")
    ckind, pkind = VARIANT_KINDS[variant]
    if not isinstance(conductor, ckind):
        raise ValueError(f"{variant} needs a {ckind.__name__} conductor")
    if not isinstance(performer, pkind):
        raise ValueError(f"{variant} needs a {pkind.__name__} performer")
    if replan_every is None:
        replan_every = conductor.K
    if replan_every < 1:
        raise ValueError("replan_every must be >= 1")
    return AgentBundle(variant=variant, conductor=conductor,
                       performer=performer, replan_every=replan_every,
                       goal_state=goal_state)


class FlatQAgent:
    """Q-performer driven directly toward a fixed goal state (no conductor)."""

    def __init__(self, qperformer, goal_state):
        self.qperformer = qperformer
        self.goal_state = np.asarray(goal_state, dtype=np.float64)

    def reset(self):
        pass

    def act(self, s, step_counter, rng):
        return self.qperformer.policy_sample(s, self.goal_state, rng)


class FlatDiffuserAgent:
    """Value-guided trajectory diffuser over single-step plans.

    Wraps an action-augmented, K=1 DConductor.  Execution modes:

      track        — steer toward the next planned state with the point-mass
                     inverse dynamics (needs ``max_speed``); robust when the
                     learned state-action coupling is weak.
      plan_actions — execute the plan array's action columns directly.
    """

    def __init__(self, dconductor, replan_every=1, execution="track",
                 max_speed=0.25):
        if not (dconductor.augmented and dconductor.K == 1):
            raise ValueError("flat diffuser needs an augmented K=1 planner")
        if execution not in ("track", "plan_actions"):
            raise ValueError(f"unknown execution mode {execution!r}")
        self.dc = dconductor
        self.replan_every = replan_every
        self.execution = execution
        self.max_speed = max_speed
        self._plan = None

    def reset(self):
        self._plan = None

    def act(self, s, step_counter, rng):
        offset = step_counter % self.replan_every
        if self._plan is None or offset == 0:
            self._plan = self.dc.plan_array(s, rng)
            offset = 0
        if self.execution == "plan_actions":
            col = min(offset, self.dc.cols - 1)
            a_n = self._plan[self.dc.d_s:, col]
            return np.clip(self.dc.action_norm.denormalize(a_n), -1.0, 1.0)
        col = min(offset + 1, self.dc.cols - 1)
        target = self.dc.state_norm.denormalize(self._plan[:self.dc.d_s, col])
        return np.clip((target[:2] - s[:2]) / self.max_speed, -1.0, 1.0)


class UniformRandomAgent:
    def reset(self):
        pass

    def act(self, s, step_counter, rng):
        return rng.uniform(-1.0, 1.0, size=2)


class WaypointExpertAgent:
    """Proportional controller through the env's wall-avoiding waypoints."""

    def __init__(self, env):
        self.env = env
        self._route = None
        self._i = 0

    def reset(self):
        self._route = None
        self._i = 0

    def act(self, s, step_counter, rng):
        if self._route is None:
            wps = u_maze_waypoints(s[:2]) if self.env.walls else []
            self._route = [np.asarray(w) for w in wps] + [self.env._goal]
            self._i = 0
        while (self._i < len(self._route) - 1
               and np.linalg.norm(s[:2] - self._route[self._i]) < 0.3):
            self._i += 1
        return np.clip(4.0 * (self._route[self._i] - s[:2]), -1.0, 1.0)


@dataclass
class EvalReport:
    returns: np.ndarray
    successes: np.ndarray
    steps: np.ndarray
    seeds: list
    random_ref: float
    expert_ref: float
    wall_clock: float

    @property
    def mean_return(self):
        return float(np.mean(self.returns))

    @property
    def normalized_score(self):
        span = self.expert_ref - self.random_ref
        return 100.0 * (self.mean_return - self.random_ref) / span

    @property
    def normalized_stderr(self):
        span = self.expert_ref - self.random_ref
        per = 100.0 * (self.returns - self.random_ref) / span
        return float(np.std(per) / np.sqrt(len(per)))

    @property
    def success_rate(self):
        return float(np.mean(self.successes))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed", "return", "success", "steps"])
            for sd, r, ok, n in zip(self.seeds, self.returns, self.successes,
                                    self.steps):
                w.writerow([sd, f"{r:.6f}", int(ok), int(n)])

    def summary(self):
        return {
            "episodes": len(self.returns),
            "mean_return": self.mean_return,
            "normalized_score": self.normalized_score,
            "normalized_stderr": self.normalized_stderr,
            "success_rate": self.success_rate,
            "random_ref": self.random_ref,
            "expert_ref": self.expert_ref,
            "wall_clock_s": self.wall_clock,
        }

    def write_summary(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2)


def rollout(agent, env, rng):
    """(undiscounted return, success, steps taken) for one episode."""
    agent.reset()
    s = env.reset(rng)
    total = 0.0
    success = False
    steps = 0
    for t in range(env.episode_len):
        a = agent.act(s, t, rng)
        res = env.step(s, a)
        total += res.reward
        s = res.next_state
        steps += 1
        if res.done:
            success = True
            break
    if env.reward_mode == "dense_exp_dist":
        success = bool(np.linalg.norm(s[:2] - env._goal) < env.goal_radius)
    return total, success, steps


def evaluate(agent, env, episodes, seed, refs=None):
    """Roll out full episodes and aggregate a normalized report."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if refs is None:
        refs = compute_reference_scores(env, seed=seed + 777_000)
    random_ref, expert_ref = refs
    t0 = time.time()
    returns, succ, steps, seeds = [], [], [], []
    for i in range(episodes):
        ep_seed = seed * 10_000 + i
        rng = np.random.default_rng(ep_seed)
        r, ok, n = rollout(agent, env, rng)
        returns.append(r)
        succ.append(ok)
        steps.append(n)
        seeds.append(ep_seed)
    return EvalReport(returns=np.array(returns), successes=np.array(succ),
                      steps=np.array(steps), seeds=seeds,
                      random_ref=random_ref, expert_ref=expert_ref,
                      wall_clock=time.time() - t0)


def compute_reference_scores(env, seed, episodes=100):
    """(random_ref, expert_ref) mean returns of the scripted anchors."""
    rand_mean = _mean_return(UniformRandomAgent(), env, episodes, seed)
    expert_mean = _mean_return(WaypointExpertAgent(env), env, episodes,
                               seed + 1)
    if expert_mean <= rand_mean:
        raise ValueError("degenerate env: expert_ref <= random_ref")
    return rand_mean, expert_mean


def _mean_return(agent, env, episodes, seed):
    total = 0.0
    for i in range(episodes):
        rng = np.random.default_rng(seed * 10_000 + i)
        r, _, _ = rollout(agent, env, rng)
        total += r
    return total / episodes
