"""Analytic toy environments (semi-implicit Euler) with goal-progress rewards.

Every environment exposes batched ``dynamics(states, actions)`` so the same
code serves data generation, the planner's ground-truth oracle and the
receding-horizon loop. Actions are bounded to [-1, 1] per dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

W_CTRL = 1e-3
ACTION_BOUND = 1.0


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    out = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


def control_cost(action, w_ctrl: float = W_CTRL) -> float:
    a = np.asarray(action, dtype=np.float64)
    return float(w_ctrl * np.sum(a * a))


class Env:
    name = "env"
    state_dim = 0
    action_dim = 0

    def __init__(self, dt: float = 0.02, w_ctrl: float = W_CTRL):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.dt = dt
        self.w_ctrl = w_ctrl
        self.clamp_count = 0

    def clamp(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64)
        c = np.clip(a, -ACTION_BOUND, ACTION_BOUND)
        if np.any(c != a):
            self.clamp_count += 1
        return c

    def dynamics(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def progress(self, pre: np.ndarray, post: np.ndarray) -> float:
        raise NotImplementedError

    def step(self, state, action):
        """One step: returns (next_state, reward)."""
        a = self.clamp(action)
        s = np.asarray(state, dtype=np.float64)
        nxt = self.dynamics(s, a)
        return nxt, self.progress(s, nxt) - control_cost(a, self.w_ctrl)

    def reset(self, seed: int) -> np.ndarray:
        raise NotImplementedError

    def goal_distance(self, state) -> float:
        raise NotImplementedError


class DoubleIntegrator(Env):
    """State (x, v) with x'' = a."""

    name = "double-integrator"
    state_dim = 2
    action_dim = 1

    def __init__(self, dt: float = 0.02, goal: float = 0.0, w_ctrl: float = W_CTRL):
        super().__init__(dt, w_ctrl)
        self.goal = float(goal)

    def dynamics(self, states, actions):
        states = np.asarray(states, dtype=np.float64)
        a = np.asarray(actions, dtype=np.float64)[..., 0]
        v = states[..., 1] + self.dt * a
        x = states[..., 0] + self.dt * v
        return np.stack([x, v], axis=-1)

    def progress(self, pre, post):
        from .planner import forward_progress_reward
        return forward_progress_reward(pre[..., :1], post[..., :1], np.array([self.goal]))

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return np.array([rng.uniform(-1.0, 1.0), 0.0])

    def goal_distance(self, state) -> float:
        return abs(float(state[0]) - self.goal)


@dataclass
class PendulumParams:
    gravity: float = 9.81
    length: float = 1.0
    mass: float = 1.0
    damping: float = 0.0
    max_torque: float = 2.0


class Pendulum(Env):
    """State (theta, omega); theta = 0 is upright, theta = pi hangs down."""

    name = "pendulum"
    state_dim = 2
    action_dim = 1

    def __init__(self, dt: float = 0.02, params: PendulumParams | None = None,
                 w_ctrl: float = W_CTRL):
        super().__init__(dt, w_ctrl)
        self.params = params or PendulumParams()

    def dynamics(self, states, actions):
        p = self.params
        states = np.asarray(states, dtype=np.float64)
        a = np.asarray(actions, dtype=np.float64)[..., 0]
        th, om = states[..., 0], states[..., 1]
        acc = (p.gravity / p.length) * np.sin(th) - p.damping * om \
            + p.max_torque * a / (p.mass * p.length ** 2)
        om = om + self.dt * acc
        th = wrap_angle(th + self.dt * om)
        return np.stack([th, om], axis=-1)

    def energy(self, state) -> float:
        p = self.params
        th, om = float(state[0]), float(state[1])
        return 0.5 * p.mass * p.length ** 2 * om ** 2 + p.mass * p.gravity * p.length * np.cos(th)

    def progress(self, pre, post):
        return float(abs(wrap_angle(pre[0])) - abs(wrap_angle(post[0])))

    def reset(self, seed: int) -> np.ndarray:
        return np.array([np.pi, 0.0])

    def goal_distance(self, state) -> float:
        return abs(float(wrap_angle(state[0])))


class LinearEnv(Env):
    """Discrete linear system s' = A s + B a, goal-reaching in state space."""

    name = "linear"

    def __init__(self, A, B, goal=None, dt: float = 1.0, w_ctrl: float = W_CTRL):
        super().__init__(dt, w_ctrl)
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.state_dim = self.A.shape[0]
        self.action_dim = self.B.shape[1]
        self.goal = np.zeros(self.state_dim) if goal is None else np.asarray(goal, dtype=np.float64)

    def dynamics(self, states, actions):
        return np.asarray(states) @ self.A.T + np.asarray(actions) @ self.B.T

    def progress(self, pre, post):
        return float(np.linalg.norm(pre - self.goal) - np.linalg.norm(post - self.goal))

    def reset(self, seed: int) -> np.ndarray:
        return np.random.default_rng(seed).uniform(-1.0, 1.0, self.state_dim)

    def goal_distance(self, state) -> float:
        return float(np.linalg.norm(np.asarray(state) - self.goal))


def step(env: Env, state, action, dt: float | None = None):
    """Functional form of ``env.step``; ``dt`` overrides the env's step size."""
    if dt is not None and dt != env.dt:
        saved, env.dt = env.dt, dt
        try:
            return env.step(state, action)
        finally:
            env.dt = saved
    return env.step(state, action)


def reset(env: Env, seed: int) -> np.ndarray:
    return env.reset(seed)


def make_env(kind: str, **kwargs) -> Env:
    kinds = {"double-integrator": DoubleIntegrator, "pendulum": Pendulum, "linear": LinearEnv}
    if kind not in kinds:
        raise ValueError(f"unknown env {kind!r}; choose from {sorted(kinds)}")
    if kind == "linear":
        dim = kwargs.pop("dim", 2)
        kwargs.setdefault("A", 0.9 * np.eye(dim))
        kwargs.setdefault("B", 0.1 * np.eye(dim))
    return kinds[kind](**kwargs)
