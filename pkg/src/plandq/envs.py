"""Toy environments and scripted data-collection controllers.

Two environments:

* ``ToyMdp`` — a single-state MDP with two self-loop actions whose rewards are
  ordered, used for closed-form optimality checks and TD fixed points.
* ``PointMassEnv`` — a kinematic 2-D point mass in a walled box.  Dense mode
  rewards exp(-dist^2) to a fixed goal each step; sparse mode pays 1 on
  entering the goal radius and ends the episode.

The point-mass state is (x, y, vx, vy); actions are velocity commands in
[-1, 1]^2 scaled by ``max_speed``.  Movement is clamped at wall segments so a
step never crosses a wall.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import Trajectory


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool


@dataclass
class ToyMdp:
    """Single state c, actions b1/b2, both self-loops, R(c,b2) > R(c,b1) > 0."""

    reward_b1: float = 0.5
    reward_b2: float = 1.0
    gamma: float = 0.9

    def __post_init__(self):
        if not (self.reward_b2 > self.reward_b1 > 0.0):
            raise ValueError("requires reward_b2 > reward_b1 > 0")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must be in [0, 1)")

    def step(self, action):
        if action not in ("b1", "b2"):
            raise ValueError(f"unknown action {action!r}")
        r = self.reward_b1 if action == "b1" else self.reward_b2
        return StepResult(next_state=np.array([0.0]), reward=r, done=False)


def _seg_intersect_t(p, q, a, b):
    """Earliest t in [0,1] where segment p->q crosses segment a-b, or None."""
    d = q - p
    e = b - a
    denom = d[0] * e[1] - d[1] * e[0]
    if abs(denom) < 1e-12:
        return None
    w = a - p
    t = (w[0] * e[1] - w[1] * e[0]) / denom
    u = (w[0] * d[1] - w[1] * d[0]) / denom
    if -1e-12 <= t <= 1.0 + 1e-12 and -1e-12 <= u <= 1.0 + 1e-12:
        return min(max(t, 0.0), 1.0)
    return None


@dataclass
class PointMassEnv:
    """Kinematic point mass in an axis-aligned box with wall segments."""

    bounds: tuple = (0.0, 0.0, 8.0, 8.0)   # (xmin, ymin, xmax, ymax)
    walls: list = field(default_factory=list)   # list of (x1, y1, x2, y2)
    goal: tuple = (4.0, 4.0)
    goal_radius: float = 0.5
    max_speed: float = 0.25
    episode_len: int = 100
    reward_mode: str = "dense_exp_dist"

    def __post_init__(self):
        g = np.asarray(self.goal, dtype=np.float64)
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmin < g[0] < xmax and ymin < g[1] < ymax):
            raise ValueError("goal must lie inside bounds")
        if self.reward_mode not in ("dense_exp_dist", "sparse_goal"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")
        self._goal = g

    @property
    def state_dim(self):
        return 4

    @property
    def action_dim(self):
        return 2

    @property
    def goal_state(self):
        """Goal as a full state vector (goal position, zero velocity)."""
        return np.array([self._goal[0], self._goal[1], 0.0, 0.0])

    def reset(self, rng, start=None):
        if start is None:
            start = self.sample_free_position(rng)
        return np.array([start[0], start[1], 0.0, 0.0])

    def sample_free_position(self, rng):
        xmin, ymin, xmax, ymax = self.bounds
        margin = 0.05 * min(xmax - xmin, ymax - ymin)
        for _ in range(1000):
            p = rng.uniform([xmin + margin, ymin + margin],
                            [xmax - margin, ymax - margin])
            if not self._on_wall(p):
                return p
        raise RuntimeError("could not sample a free position")

    def _on_wall(self, p, eps=0.15):
        for x1, y1, x2, y2 in self.walls:
            a = np.array([x1, y1])
            b = np.array([x2, y2])
            ab = b - a
            tt = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
            if np.linalg.norm(p - (a + tt * ab)) < eps:
                return True
        return False

    def _move(self, pos, delta):
        """Advance pos by delta, stopping just short of the first wall hit."""
        target = pos + delta
        xmin, ymin, xmax, ymax = self.bounds
        target = np.clip(target, [xmin, ymin], [xmax, ymax])
        best_t = None
        for x1, y1, x2, y2 in self.walls:
            t = _seg_intersect_t(pos, target, np.array([x1, y1]), np.array([x2, y2]))
            if t is not None and (best_t is None or t < best_t):
                best_t = t
        if best_t is not None:
            target = pos + max(best_t - 1e-3, 0.0) * (target - pos)
        return target

    def step(self, state, action):
        action = np.asarray(action, dtype=np.float64)
        if not np.all(np.isfinite(action)):
            raise ValueError("non-finite action")
        a = np.clip(action, -1.0, 1.0)
        pos = state[:2]
        vel = a * self.max_speed
        new_pos = self._move(pos, vel)
        next_state = np.concatenate([new_pos, new_pos - pos])
        d = np.linalg.norm(new_pos - self._goal)
        if self.reward_mode == "dense_exp_dist":
            reward = float(np.exp(-d * d))
            done = False
        else:
            reward = 1.0 if d < self.goal_radius else 0.0
            done = reward > 0.0
        return StepResult(next_state=next_state, reward=reward, done=done)


def open_maze(reward_mode="dense_exp_dist"):
    """8x8 open square with a centered goal."""
    return PointMassEnv(bounds=(0.0, 0.0, 8.0, 8.0), walls=[], goal=(4.0, 4.0),
                        goal_radius=0.5, max_speed=0.25, episode_len=100,
                        reward_mode=reward_mode)


def u_maze():
    """8x8 box with a U-shaped wall; sparse goal behind the opening."""
    walls = [
        (2.0, 2.0, 6.0, 2.0),
        (6.0, 2.0, 6.0, 6.0),
        (2.0, 6.0, 6.0, 6.0),
    ]
    return PointMassEnv(bounds=(0.0, 0.0, 8.0, 8.0), walls=walls, goal=(4.0, 4.0),
                        goal_radius=0.5, max_speed=0.25, episode_len=300,
                        reward_mode="sparse_goal")


def _p_controller(pos, target, gain=4.0):
    return np.clip(gain * (target - pos), -1.0, 1.0)


def _rollout(env, start, act_fn, rng, max_steps=None):
    T = max_steps if max_steps is not None else env.episode_len
    s = env.reset(rng, start=start)
    states, actions, rewards = [], [], []
    done = False
    for t in range(T):
        a = act_fn(s, t, rng)
        res = env.step(s, a)
        states.append(s)
        actions.append(np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0))
        rewards.append(res.reward)
        s = res.next_state
        if res.done:
            done = True
            break
    return Trajectory(states=np.array(states), actions=np.array(actions),
                      rewards=np.array(rewards), terminal=done)


def scripted_collect(env, policy, episodes, seed, exclusion_radius=2.0,
                     waypoints=None):
    """Generate trajectories with a scripted controller.

    Policies:
      uniform_random     — i.i.d. uniform actions in [-1, 1]^2.
      random_goal_avoider — proportional control toward uniformly drawn goals,
                            resampled when a drawn goal lies within
                            ``exclusion_radius`` of the true goal, and also
                            re-drawn every 25 steps.
      waypoint_expert    — proportional control through waypoints and then to
                            the true goal.  With ``waypoints=None`` the route
                            is derived per episode from the sampled start
                            (walled envs only; open envs go straight in).
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    xmin, ymin, xmax, ymax = env.bounds
    if policy == "random_goal_avoider":
        # reject upfront if no goal outside the exclusion ball can exist
        corners = np.array([[xmin, ymin], [xmin, ymax], [xmax, ymin], [xmax, ymax]])
        if all(np.linalg.norm(c - env._goal) < exclusion_radius for c in corners):
            raise ValueError("exclusion_radius covers the whole maze")

    trajs = []
    for _ in range(episodes):
        start = env.sample_free_position(rng)
        if policy == "uniform_random":
            def act(s, t, r):
                return r.uniform(-1.0, 1.0, size=2)
            trajs.append(_rollout(env, start, act, rng))
        elif policy == "random_goal_avoider":
            ctl = {"goal": None}

            def act(s, t, r, ctl=ctl):
                if ctl["goal"] is None or t % 25 == 0:
                    while True:
                        g = r.uniform([xmin, ymin], [xmax, ymax])
                        if np.linalg.norm(g - env._goal) >= exclusion_radius:
                            break
                    ctl["goal"] = g
                noise = r.normal(0.0, 0.2, size=2)
                return np.clip(_p_controller(s[:2], ctl["goal"]) + noise, -1.0, 1.0)
            trajs.append(_rollout(env, start, act, rng))
        elif policy == "waypoint_expert":
            route = waypoints
            if route is None:
                route = u_maze_waypoints(start) if env.walls else []
            wps = [np.asarray(w, dtype=np.float64) for w in route]
            wps = wps + [env._goal]
            ctl = {"i": 0}

            def act(s, t, r, ctl=ctl, wps=wps):
                while (ctl["i"] < len(wps) - 1
                       and np.linalg.norm(s[:2] - wps[ctl["i"]]) < 0.3):
                    ctl["i"] += 1
                return _p_controller(s[:2], wps[ctl["i"]])
            trajs.append(_rollout(env, start, act, rng))
        else:
            raise ValueError(f"unknown policy {policy!r}")
    return trajs


def u_maze_waypoints(start_pos):
    """Waypoints steering around the U-wall from outside toward the center."""
    x, y = start_pos[0], start_pos[1]
    route = []
    if not (2.0 < x < 6.0 and 2.0 < y < 6.0):
        # approach the opening on the left side of the U
        if x > 2.0:
            route.append((1.0, 1.0 if y < 4.0 else 7.0))
        route.append((1.0, 4.0))
    return route


def env_from_config(table):
    """Build a PointMassEnv from a TOML ``[env]`` table."""
    known = {"kind", "bounds", "walls", "goal", "goal_radius", "max_speed",
             "episode_len", "reward_mode"}
    unknown = set(table) - known
    if unknown:
        raise ValueError(f"unknown env keys: {sorted(unknown)}")
    kind = table.get("kind", "pointmass")
    if kind == "open_maze":
        env = open_maze(table.get("reward_mode", "dense_exp_dist"))
    elif kind == "u_maze":
        env = u_maze()
    elif kind == "pointmass":
        env = PointMassEnv(
            bounds=tuple(table.get("bounds", (0.0, 0.0, 8.0, 8.0))),
            walls=[tuple(w) for w in table.get("walls", [])],
            goal=tuple(table.get("goal", (4.0, 4.0))),
            goal_radius=table.get("goal_radius", 0.5),
            max_speed=table.get("max_speed", 0.25),
            episode_len=table.get("episode_len", 100),
            reward_mode=table.get("reward_mode", "dense_exp_dist"),
        )
    else:
        raise ValueError(f"unknown env kind {kind!r}")
    for key in ("goal", "goal_radius", "max_speed", "episode_len", "reward_mode",
                "walls", "bounds"):
        if key in table and kind in ("open_maze", "u_maze"):
            setattr(env, key, table[key] if key != "walls"
                    else [tuple(w) for w in table[key]])
    env.__post_init__()
    return env
