"""Sampling-based MPC (MPPI) over pluggable rollout oracles.

An oracle maps a current state and N candidate action sequences (N, H, M_a)
to predicted post-action states (N, H, M_s). The truth oracle integrates an
environment; the model oracle runs the learned world model in one forward
pass per planning step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import sim
from .numerics import ContractError

NOMINAL_TAIL = 0.0


class PlannerError(RuntimeError):
    """Planning could not produce a finite-cost candidate."""


@dataclass(frozen=True)
class MPPIConfig:
    horizon: int = 20
    samples: int = 64
    lam: float = 0.25
    sigma: tuple[float, ...] | float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.samples < 1:
            raise ContractError("horizon and samples must be >= 1")
        if self.lam <= 0:
            raise ContractError("temperature must be positive")
        if np.any(np.asarray(self.sigma) <= 0):
            raise ContractError("noise std entries must be positive")

    def sigma_vec(self, action_dim: int) -> np.ndarray:
        s = np.asarray(self.sigma, dtype=np.float64)
        return np.full(action_dim, float(s)) if s.ndim == 0 else s.reshape(action_dim)


PRESETS = {
    "desk": MPPIConfig(horizon=20, samples=64, lam=0.25),
    "walker": MPPIConfig(horizon=100, samples=256, lam=0.25),
    "hopper": MPPIConfig(horizon=100, samples=256, lam=0.5),
    "go1": MPPIConfig(horizon=40, samples=30, lam=0.1),
}


# -- costs --------------------------------------------------------------------

@dataclass
class CostSpec:
    kind: str = "goal"  # tracking | goal | forward_progress | zero
    Q: np.ndarray | None = None  # diagonal weights per state dim
    R: np.ndarray | None = None  # diagonal weights per action dim
    s_ref: np.ndarray | None = None  # (H, M_s) for tracking
    a_ref: np.ndarray | None = None  # (H, M_a)
    goal: np.ndarray | None = None
    wrap_dims: tuple[int, ...] = ()  # angle dims compared modulo 2 pi
    position_dims: tuple[int, ...] = (0,)
    healthy_reward: float = 0.0
    w_fwd: float = 0.0
    w_ctrl: float = 0.0
    forward_dim: int = 0
    dt: float = 1.0

    def __post_init__(self):
        if self.kind not in ("tracking", "goal", "forward_progress", "zero"):
            raise ContractError(f"unknown cost kind {self.kind!r}")
        for name in ("Q", "R"):
            w = getattr(self, name)
            if w is not None:
                w = np.asarray(w, dtype=np.float64)
                if np.any(w < 0):
                    raise ContractError(f"{name} weights must be nonnegative")
                setattr(self, name, w)


def walker_style_cost(**kw) -> CostSpec:
    """Tracking cost with survival, forward-velocity and control terms."""
    kw.setdefault("healthy_reward", 1.0)
    kw.setdefault("w_fwd", 0.5)
    kw.setdefault("w_ctrl", 1e-3)
    return CostSpec(kind="tracking", **kw)


def _quad(err: np.ndarray, w: np.ndarray | None, what: str) -> np.ndarray:
    if w is None:
        return np.zeros(err.shape[:-1])
    if w.shape != (err.shape[-1],):
        raise ContractError(f"{what} has {w.shape[0] if w.ndim else 1} weights "
                            f"for {err.shape[-1]}-dim vectors")
    return np.einsum("...i,i,...i->...", err, w, err)


def _state_error(states, ref, wrap_dims):
    err = np.asarray(ref) - states
    if wrap_dims:
        err = err.copy()
        idx = list(wrap_dims)
        err[..., idx] = sim.wrap_angle(err[..., idx])
    return err


def tracking_cost(states, actions, spec: CostSpec, s0=None):
    """Sum over steps of quadratic state/action tracking terms plus optional
    survival, forward-velocity and control terms. Batched over leading axes."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    H = states.shape[-2]
    if spec.s_ref is not None and np.shape(spec.s_ref)[0] < H:
        raise ContractError(f"reference length {np.shape(spec.s_ref)[0]} < horizon {H}")
    s_ref = np.zeros(states.shape[-1]) if spec.s_ref is None else np.asarray(spec.s_ref)[:H]
    a_ref = np.zeros(actions.shape[-1]) if spec.a_ref is None else np.asarray(spec.a_ref)[:H]
    cost = _quad(_state_error(states, s_ref, spec.wrap_dims), spec.Q, "Q").sum(-1)
    cost = cost + _quad(a_ref - actions, spec.R, "R").sum(-1)
    if spec.healthy_reward:
        cost = cost - spec.healthy_reward * H
    if spec.w_fwd:
        x = states[..., spec.forward_dim]
        x0 = x[..., :1] if s0 is None else np.broadcast_to(np.asarray(s0)[spec.forward_dim], x[..., :1].shape)
        dx = np.diff(np.concatenate([x0, x], axis=-1), axis=-1)
        cost = cost - spec.w_fwd * (dx / spec.dt).sum(-1)
    if spec.w_ctrl:
        cost = cost + spec.w_ctrl * (actions * actions).sum(axis=(-1, -2))
    return cost


def goal_cost(states, actions, spec: CostSpec):
    s_goal = np.zeros(states.shape[-1]) if spec.goal is None else np.asarray(spec.goal)
    cost = _quad(_state_error(states, s_goal, spec.wrap_dims), spec.Q, "Q").sum(-1)
    cost = cost + _quad(-np.asarray(actions), spec.R, "R").sum(-1)
    if spec.w_ctrl:
        cost = cost + spec.w_ctrl * (np.asarray(actions) ** 2).sum(axis=(-1, -2))
    return cost


def forward_progress_reward(p_pre, p_post, goal, eps: float = 1e-8):
    """Displacement projected on the unit direction to the goal (0 at the goal)."""
    p_pre = np.asarray(p_pre, dtype=np.float64)
    p_post = np.asarray(p_post, dtype=np.float64)
    d = np.asarray(goal, dtype=np.float64) - p_pre
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    d_hat = np.where(norm >= eps, d / np.where(norm >= eps, norm, 1.0), 0.0)
    r = ((p_post - p_pre) * d_hat).sum(-1)
    return float(r) if np.ndim(r) == 0 else r


def progress_cost(states, actions, spec: CostSpec, s0):
    dims = list(spec.position_dims)
    p = np.asarray(states)[..., dims]
    p0 = np.broadcast_to(np.asarray(s0)[dims], p[..., :1, :].shape)
    pre = np.concatenate([p0, p[..., :-1, :]], axis=-2)
    reward = forward_progress_reward(pre, p, spec.goal).sum(-1)
    return -reward + spec.w_ctrl * (np.asarray(actions) ** 2).sum(axis=(-1, -2))


def trajectory_cost(states, actions, spec: CostSpec, s0) -> np.ndarray:
    if spec.kind == "tracking":
        return tracking_cost(states, actions, spec, s0)
    if spec.kind == "goal":
        return goal_cost(states, actions, spec)
    if spec.kind == "forward_progress":
        return progress_cost(states, actions, spec, s0)
    return np.zeros(np.shape(states)[:-2])


def default_cost(env: sim.Env, kind: str = "goal") -> CostSpec:
    """Implementer-chosen toy-env cost weights (documented in the README)."""
    if isinstance(env, sim.DoubleIntegrator):
        if kind == "forward_progress":
            return CostSpec(kind=kind, goal=np.array([env.goal]), position_dims=(0,), w_ctrl=env.w_ctrl)
        # large Q keeps the temperature selective; the velocity term brakes before the goal
        return CostSpec(kind=kind, Q=np.array([100.0, 10.0]), goal=np.array([env.goal, 0.0]),
                        w_ctrl=env.w_ctrl)
    if isinstance(env, sim.Pendulum):
        return CostSpec(kind="goal", Q=np.array([100.0, 1.0]), goal=np.zeros(2), wrap_dims=(0,),
                        w_ctrl=env.w_ctrl)
    if isinstance(env, sim.LinearEnv):
        if kind == "forward_progress":
            return CostSpec(kind=kind, goal=env.goal, position_dims=tuple(range(env.state_dim)),
                            w_ctrl=env.w_ctrl)
        return CostSpec(kind="goal", Q=np.full(env.state_dim, 100.0), goal=env.goal, w_ctrl=env.w_ctrl)
    raise ContractError(f"no default cost for {type(env).__name__}")


# -- oracles ------------------------------------------------------------------

class TruthOracle:
    """Exact environment dynamics."""

    def __init__(self, env: sim.Env):
        self.env = env
        self.state_dim = env.state_dim
        self.action_dim = env.action_dim

    def reset(self, state) -> None:
        pass

    def observe(self, state, action, next_state) -> None:
        pass

    def rollout(self, state, actions: np.ndarray) -> np.ndarray:
        N, H, _ = actions.shape
        s = np.broadcast_to(np.asarray(state, dtype=np.float64), (N, self.state_dim)).copy()
        out = np.empty((N, H, self.state_dim))
        with np.errstate(all="ignore"):
            for t in range(H):
                s = self.env.dynamics(s, actions[:, t])
                out[:, t] = s
        return out


class ModelOracle:
    """Learned world model as dynamics.

    Keeps the last h observed (state, action) pairs. A rollout places the
    history at steps 0..h-1 (the current state is step h-1), the candidate
    actions at steps h-1..h+H-2, and decodes predictions for steps h..h+H-1.
    """

    def __init__(self, model, mins: np.ndarray, maxs: np.ndarray, struct_idx: np.ndarray,
                 n_state: int, sample: bool = False, seed: int = 0):
        from .tokenizer import discretize
        self._discretize = discretize
        self.model = model
        self.mins = np.asarray(mins, dtype=np.float64)
        self.maxs = np.asarray(maxs, dtype=np.float64)
        self.struct_idx = np.asarray(struct_idx)
        self.state_dim = n_state
        self.action_dim = len(self.mins) - n_state
        self.sample = sample
        self.rng = np.random.default_rng(seed)
        self.states: list[np.ndarray] = []
        self.actions: list[np.ndarray] = []

    @classmethod
    def from_episode_layout(cls, model, episode, stats, **kw) -> "ModelOracle":
        from .data import channel_ranges
        from .structure import channel_struct_indices
        mins, maxs = channel_ranges(episode, stats)
        sidx = channel_struct_indices([c.body_node for c in episode.state_channels + episode.action_channels],
                                      episode.tree)
        return cls(model, mins, maxs, sidx, episode.states.shape[1], **kw)

    @property
    def ready(self) -> bool:
        return len(self.states) >= self.model.config.h

    def reset(self, state) -> None:
        self.states = [np.asarray(state, dtype=np.float64)]
        self.actions = []

    def observe(self, state, action, next_state) -> None:
        h = self.model.config.h
        self.actions.append(np.asarray(action, dtype=np.float64))
        self.states.append(np.asarray(next_state, dtype=np.float64))
        self.states = self.states[-h:]
        self.actions = self.actions[-(h - 1):] if h > 1 else []

    def _norm(self, x, lo, hi):
        from .data import normalize_values
        return normalize_values(x, lo, hi)

    def rollout(self, state, actions: np.ndarray) -> np.ndarray:
        from .data import denormalize_values
        from .tokenizer import TokenBatch, decode_distribution
        c = self.model.config
        N, H, Ma = actions.shape
        if H > c.k:
            raise ContractError(f"planning horizon {H} exceeds the model's query count {c.k}")
        if not self.ready:
            raise ContractError(f"model oracle needs {c.h} observed states before planning")
        Ms = self.state_dim
        lo_s, hi_s = self.mins[:Ms], self.maxs[:Ms]
        lo_a, hi_a = self.mins[Ms:], self.maxs[Ms:]
        hist = self._norm(np.array(self.states[-c.h:]), lo_s, hi_s)
        values = np.full((N, c.L, Ms), 0.5)
        values[:, :c.h] = hist
        act = np.full((N, c.L, Ma), 0.5)
        if c.h > 1:
            act[:, :c.h - 1] = self._norm(np.array(self.actions[-(c.h - 1):]), lo_a, hi_a)
        act[:, c.h - 1:c.h - 1 + H] = self._norm(actions, lo_a, hi_a)
        batch = TokenBatch(values, self._discretize(values, c.K), self._discretize(act, c.K),
                           np.ones((N, c.L), dtype=bool), self.struct_idx, ["plan"] * N, [0] * N)
        probs = self.model.predict(batch).probs[:, c.h - 1:c.h - 1 + H]  # (N, H, Ms, K)
        if self.sample:
            cdf = probs.cumsum(-1)
            u = self.rng.random(cdf.shape[:-1] + (1,))
            idx = np.minimum((u > cdf).sum(-1), c.K - 1)
            norm_pred = (idx + 0.5) / c.K
        else:
            norm_pred = decode_distribution(probs)
        return denormalize_values(norm_pred, lo_s, hi_s)


# -- MPPI ---------------------------------------------------------------------

def mppi_weights(costs: np.ndarray, lam: float) -> np.ndarray:
    """Normalised ``exp(-(L - L_min) / lam)``; non-finite costs get weight 0."""
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not finite.any():
        raise PlannerError("all sampled rollouts have non-finite cost")
    c_min = costs[finite].min()
    w = np.where(finite, np.exp(-(np.where(finite, costs, c_min) - c_min) / lam), 0.0)
    return w / w.sum()


@dataclass
class StepInfo:
    weights: np.ndarray
    costs: np.ndarray
    samples: np.ndarray  # (N, H, M_a) clamped candidate sequences
    updated: np.ndarray  # weighted average before shifting


def sample_perturbations(cfg: MPPIConfig, step: int, action_dim: int) -> np.ndarray:
    """(N, H, M_a) Gaussian noise; sample n uses its own stream (seed, step, n)."""
    sig = cfg.sigma_vec(action_dim)
    out = np.empty((cfg.samples, cfg.horizon, action_dim))
    for n in range(cfg.samples):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step, n]))
        out[n] = rng.standard_normal((cfg.horizon, action_dim)) * sig
    return out


def mppi_step(state, nominal: np.ndarray, oracle, cost: CostSpec, cfg: MPPIConfig,
              step: int = 0) -> tuple[np.ndarray, np.ndarray, StepInfo]:
    """One MPPI update. Returns (action to execute, shifted nominal, info)."""
    nominal = np.asarray(nominal, dtype=np.float64)
    if nominal.shape[0] != cfg.horizon:
        raise ContractError(f"nominal length {nominal.shape[0]} != horizon {cfg.horizon}")
    eps = sample_perturbations(cfg, step, nominal.shape[1])
    samples = np.clip(nominal[None] + eps, -sim.ACTION_BOUND, sim.ACTION_BOUND)
    states = oracle.rollout(state, samples)
    with np.errstate(all="ignore"):
        costs = trajectory_cost(states, samples, cost, state)
    bad = ~np.all(np.isfinite(states), axis=(1, 2))
    costs = np.where(bad | ~np.isfinite(costs), np.inf, costs)
    w = mppi_weights(costs, cfg.lam)
    updated = np.tensordot(w, samples, axes=1)
    shifted = np.concatenate([updated[1:], np.full((1, nominal.shape[1]), NOMINAL_TAIL)], axis=0)
    return updated[0].copy(), shifted, StepInfo(w, costs, samples, updated)


@dataclass
class EpisodeResult:
    total_reward: float
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    diverged: bool
    final_distance: float
    trace: list[dict] = field(default_factory=list)


def run_episode(env: sim.Env, oracle, cfg: MPPIConfig, cost: CostSpec, T: int, seed: int = 0,
                warmup: int = 0, trace_path=None, initial_state=None) -> EpisodeResult:
    """Receding-horizon control for ``T`` steps from ``env.reset(seed)``.

    ``warmup`` random actions (seeded) are executed first to fill a model
    oracle's history; their rewards are not counted.
    """
    state = env.reset(seed) if initial_state is None else np.asarray(initial_state, dtype=np.float64)
    oracle.reset(state)
    wrng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    for _ in range(warmup):
        a = wrng.uniform(-sim.ACTION_BOUND, sim.ACTION_BOUND, env.action_dim)
        nxt = env.dynamics(state, a)
        oracle.observe(state, a, nxt)
        state = nxt
    plan_cfg = MPPIConfig(cfg.horizon, cfg.samples, cfg.lam, cfg.sigma, seed)
    nominal = np.zeros((cfg.horizon, env.action_dim))
    states, actions, rewards, trace = [state], [], [], []
    diverged = False
    for t in range(T):
        a, nominal, info = mppi_step(state, nominal, oracle, cost, plan_cfg, step=t)
        nxt, r = env.step(state, a)
        finite_costs = info.costs[np.isfinite(info.costs)]
        rec = {"step": t, "action": a.tolist(), "state": np.asarray(nxt).tolist(), "reward": float(r),
               "best_cost": float(finite_costs.min()), "worst_cost": float(finite_costs.max())}
        trace.append(rec)
        if not np.all(np.isfinite(nxt)):
            diverged = True
            break
        oracle.observe(state, a, nxt)
        states.append(nxt)
        actions.append(a)
        rewards.append(r)
        state = nxt
    if trace_path is not None:
        with open(trace_path, "w") as f:
            for rec in trace:
                f.write(json.dumps(rec) + "\n")
    final = env.goal_distance(state) if np.all(np.isfinite(state)) else math.inf
    return EpisodeResult(float(np.sum(rewards)), np.array(states),
                         np.array(actions).reshape(len(actions), env.action_dim), np.array(rewards),
                         diverged, final, trace)


def run_episodes(env_factory, oracle_factory, cfg: MPPIConfig, cost: CostSpec, T: int,
                 seeds: Sequence[int], warmup: int = 0) -> list[EpisodeResult]:
    out = []
    for s in seeds:
        env = env_factory()
        out.append(run_episode(env, oracle_factory(env), cfg, cost, T, seed=s, warmup=warmup))
    return out
