"""Small continuous-control tasks and random finite MDPs.

All continuous environments have at least two action dimensions, because an
action needs a non-trivial orthogonal complement inside its box. Dynamics are
deterministic explicit-Euler updates with a fixed step ``dt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    state_low: np.ndarray
    state_high: np.ndarray
    max_episode_steps: int
    reward_bound: float

    def __post_init__(self):
        if self.action_dim < 2:
            raise ValueError("action_dim must be at least 2")
        if not np.all(self.action_low < self.action_high):
            raise ValueError("action_low must be strictly below action_high")


class ContinuousEnv:
    """Shared reset/step bookkeeping; subclasses supply ``_reset`` and ``_advance``."""

    spec: EnvSpec

    def __init__(self):
        self.rng = np.random.default_rng()
        self.state: np.ndarray | None = None
        self.elapsed = 0
        self.done = True
        self.terminated = False

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self._reset()
        self.elapsed = 0
        self.done = False
        self.terminated = False
        return self.observe()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        """Advance one step. ``done`` covers both goal arrival and the time limit;
        ``self.terminated`` is true only for goal arrival."""
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        action = np.clip(np.asarray(action, dtype=float), self.spec.action_low, self.spec.action_high)
        reward, reached = self._advance(action)
        self.elapsed += 1
        self.terminated = reached
        self.done = reached or self.elapsed >= self.spec.max_episode_steps
        return self.observe(), float(reward), self.done

    def observe(self) -> np.ndarray:
        return self.state.copy()

    def sample_action(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.spec.action_low, self.spec.action_high)

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, action: np.ndarray) -> tuple[float, bool]:
        raise NotImplementedError


class PointMass2D(ContinuousEnv):
    """Unit mass in the plane pushed toward the origin.

    state = (x, y, vx, vy), action = force in [-1, 1]^2.
    """

    def __init__(self, dt=0.05, damping=1.0, force_scale=2.0, goal_radius=0.1, ctrl_cost=0.05,
                 start_radius=1.0, max_episode_steps=100):
        super().__init__()
        self.dt, self.damping, self.force_scale = dt, damping, force_scale
        self.goal_radius, self.ctrl_cost, self.start_radius = goal_radius, ctrl_cost, start_radius
        self.pos_limit = 2.0
        self.vel_limit = max(force_scale / damping, 1.0) if damping > 0 else 10.0
        lim = np.array([self.pos_limit] * 2 + [self.vel_limit] * 2)
        self.spec = EnvSpec(
            "PointMass2D", 4, 2, -np.ones(2), np.ones(2), -lim, lim, max_episode_steps,
            reward_bound=self.pos_limit * math.sqrt(2) + 2 * ctrl_cost,
        )

    def _reset(self):
        while True:
            pos = self.rng.uniform(-self.start_radius, self.start_radius, 2)
            if np.linalg.norm(pos) > 3 * self.goal_radius:
                return np.concatenate([pos, np.zeros(2)])

    def _advance(self, action):
        pos, vel = self.state[:2], self.state[2:]
        new_pos = pos + self.dt * vel
        new_vel = (1.0 - self.damping * self.dt) * vel + self.dt * self.force_scale * action
        hit = np.abs(new_pos) > self.pos_limit
        new_pos = np.clip(new_pos, -self.pos_limit, self.pos_limit)
        new_vel = np.where(hit, 0.0, np.clip(new_vel, -self.vel_limit, self.vel_limit))
        self.state = np.concatenate([new_pos, new_vel])
        dist = float(np.linalg.norm(new_pos))
        reward = -dist - self.ctrl_cost * float(action @ action)
        return reward, dist < self.goal_radius


class Reacher2Link(ContinuousEnv):
    """Planar two-link arm driving its fingertip to a fixed target.

    Joints are independent damped double integrators (no inertial coupling).
    state = (cos q1, sin q1, cos q2, sin q2, dq1, dq2), action = joint torques.
    """

    def __init__(self, dt=0.05, damping=1.0, torque_scale=4.0, goal_radius=0.05, ctrl_cost=0.05,
                 link_lengths=(0.5, 0.5), target=(0.6, 0.4), max_episode_steps=100):
        super().__init__()
        self.dt, self.damping, self.torque_scale = dt, damping, torque_scale
        self.goal_radius, self.ctrl_cost = goal_radius, ctrl_cost
        self.links = np.asarray(link_lengths, dtype=float)
        self.target = np.asarray(target, dtype=float)
        self.vel_limit = 5.0
        lim = np.array([1.0, 1.0, 1.0, 1.0, self.vel_limit, self.vel_limit])
        reach = float(self.links.sum() + np.linalg.norm(self.target))
        self.spec = EnvSpec("Reacher2Link", 6, 2, -np.ones(2), np.ones(2), -lim, lim, max_episode_steps,
                            reward_bound=reach + 2 * ctrl_cost)
        self.q = np.zeros(2)
        self.dq = np.zeros(2)

    def fingertip(self) -> np.ndarray:
        l1, l2 = self.links
        q1, q2 = self.q
        return np.array([l1 * math.cos(q1) + l2 * math.cos(q1 + q2), l1 * math.sin(q1) + l2 * math.sin(q1 + q2)])

    def _pack(self):
        return np.array([math.cos(self.q[0]), math.sin(self.q[0]), math.cos(self.q[1]), math.sin(self.q[1]),
                         self.dq[0], self.dq[1]])

    def _reset(self):
        self.q = self.rng.uniform(-math.pi, math.pi, 2)
        self.dq = np.zeros(2)
        return self._pack()

    def _advance(self, action):
        new_q = self.q + self.dt * self.dq
        self.dq = np.clip((1.0 - self.damping * self.dt) * self.dq + self.dt * self.torque_scale * action,
                          -self.vel_limit, self.vel_limit)
        self.q = (new_q + math.pi) % (2 * math.pi) - math.pi
        self.state = self._pack()
        dist = float(np.linalg.norm(self.fingertip() - self.target))
        return -dist - self.ctrl_cost * float(action @ action), dist < self.goal_radius


class Incline2D(ContinuousEnv):
    """Block on a slope pushed up to a goal against gravity and Coulomb friction.

    The first action channel is a tangential push, the second presses the block
    into the surface (raising the normal force, hence the friction ceiling).
    state = (x - goal, v, slope).
    """

    def __init__(self, dt=0.05, mass=1.0, gravity=9.81, mu_s=0.6, mu_k=0.4, push_scale=15.0,
                 press_scale=5.0, slope_range=(0.1, 0.5), goal=1.0, goal_radius=0.05, ctrl_cost=0.05,
                 max_episode_steps=100):
        super().__init__()
        self.dt, self.mass, self.gravity = dt, mass, gravity
        self.mu_s, self.mu_k = mu_s, mu_k
        self.push_scale, self.press_scale = push_scale, press_scale
        self.slope_range = tuple(slope_range)
        self.goal, self.goal_radius, self.ctrl_cost = goal, goal_radius, ctrl_cost
        self.x_limits = (-2.0, 3.0)
        self.vel_limit = 5.0
        low = np.array([self.x_limits[0] - goal, -self.vel_limit, 0.0])
        high = np.array([self.x_limits[1] - goal, self.vel_limit, math.pi / 2])
        self.spec = EnvSpec("Incline2D", 3, 2, -np.ones(2), np.ones(2), low, high, max_episode_steps,
                            reward_bound=max(abs(low[0]), high[0]) + 2 * ctrl_cost)

    def _reset(self):
        slope = self.rng.uniform(*self.slope_range)
        x = self.rng.uniform(-0.5, 0.0)
        return np.array([x - self.goal, 0.0, slope])

    def _advance(self, action):
        rel, v, slope = self.state
        x = rel + self.goal
        weight = self.mass * self.gravity
        normal = weight * math.cos(slope) + self.press_scale * 0.5 * (action[1] + 1.0)
        drive = self.push_scale * action[0] - weight * math.sin(slope)
        if abs(v) < 1e-9 and abs(drive) <= self.mu_s * normal:
            acc = 0.0
        else:
            direction = math.copysign(1.0, v if abs(v) >= 1e-9 else drive)
            acc = (drive - direction * self.mu_k * normal) / self.mass
        new_x = x + self.dt * v
        new_v = v + self.dt * acc
        if abs(v) >= 1e-9 and new_v * v < 0 and abs(drive) <= self.mu_s * normal:
            new_v = 0.0  # kinetic friction stops the block, it cannot reverse it
        new_v = float(np.clip(new_v, -self.vel_limit, self.vel_limit))
        if not self.x_limits[0] <= new_x <= self.x_limits[1]:
            new_x = float(np.clip(new_x, *self.x_limits))
            new_v = 0.0
        self.state = np.array([new_x - self.goal, new_v, slope])
        dist = abs(new_x - self.goal)
        return -dist - self.ctrl_cost * float(action @ action), dist < self.goal_radius


ENV_REGISTRY = {
    "PointMass2D": PointMass2D,
    "Reacher2Link": Reacher2Link,
    "Incline2D": Incline2D,
}


def make_env(env_id: str, **params) -> ContinuousEnv:
    try:
        cls = ENV_REGISTRY[env_id]
    except KeyError:
        raise ValueError(f"unknown env {env_id!r}; choose from {sorted(ENV_REGISTRY)}") from None
    return cls(**params)


# -- finite MDPs ------------------------------------------------------------
@dataclass
class FiniteMdp:
    """Tabular MDP with kernel ``transition[s, a, s']`` and reward ``reward[s, a, s']``.

    Value beyond a terminal next state is zero.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    terminal_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        s, a, s2 = self.transition.shape
        if s != s2 or self.reward.shape != self.transition.shape:
            raise ValueError("transition and reward must both have shape (S, A, S)")
        if self.terminal_mask is None:
            self.terminal_mask = np.zeros(s, dtype=bool)
        self.terminal_mask = np.asarray(self.terminal_mask, dtype=bool)
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(self.transition < 0) or np.max(np.abs(self.transition.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("every transition row must be a probability distribution")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward)))

    def is_deterministic(self) -> bool:
        return bool(np.all(np.isclose(self.transition.max(axis=2), 1.0, rtol=0, atol=0)))


def make_random_mdp(num_states: int, num_actions: int, branching: int, seed: int,
                    gamma: float = 0.9, num_terminal: int = 0) -> FiniteMdp:
    """Random MDP whose rows each have at most ``branching`` successors.

    Successor weights are Dirichlet(1) and rewards are uniform on [-1, 1]. The
    last ``num_terminal`` states are marked terminal.
    """
    if num_states < 1 or num_actions < 1 or not 1 <= branching <= num_states:
        raise ValueError("need num_states, num_actions >= 1 and 1 <= branching <= num_states")
    if not 0 <= num_terminal < num_states:
        raise ValueError("num_terminal must leave at least one non-terminal state")
    rng = np.random.default_rng(seed)
    p = np.zeros((num_states, num_actions, num_states))
    for s in range(num_states):
        for a in range(num_actions):
            succ = rng.choice(num_states, size=branching, replace=False)
            p[s, a, succ] = rng.dirichlet(np.ones(branching)) if branching > 1 else 1.0
    p /= p.sum(axis=2, keepdims=True)
    reward = rng.uniform(-1.0, 1.0, size=p.shape)
    mask = np.zeros(num_states, dtype=bool)
    if num_terminal:
        mask[-num_terminal:] = True
    return FiniteMdp(p, reward, gamma, mask)
