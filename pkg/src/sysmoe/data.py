"""Trajectory episodes: normalisation, padding, splits, synthetic generators, file IO.

Episode files are JSON lines, one episode per line::

    {"system_id": "sys0",
     "channels": [{"name": "s0", "modality": "state", "body_node": "link0",
                   "min": null, "max": null}, ...],
     "tree": [["base", "ROOT"], ["link0", "base"], ...],
     "states": [[...], ...],   # T rows x M_s
     "actions": [[...], ...],  # T rows x M_a
     "mask": [true, ...]}

Channels list states first, then actions. ``min``/``max`` carry
normalisation stats once known. Stats files are tab-separated with the header
``system_id channel min max``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import sim

GLOBAL_NODE = "GLOBAL"
MAX_LEN = 150


class StatsError(ValueError):
    """Normalisation statistics are missing or cannot be computed."""


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    modality: str  # "state" | "action"
    body_node: str = GLOBAL_NODE
    norm_min: float | None = None
    norm_max: float | None = None

    def __post_init__(self):
        if self.modality not in ("state", "action"):
            raise ValueError(f"channel {self.name!r}: modality must be state or action")
        if self.norm_min is not None and self.norm_max is not None and self.norm_min > self.norm_max:
            raise ValueError(f"channel {self.name!r}: norm_min > norm_max")


@dataclass
class TrajectoryEpisode:
    states: np.ndarray
    actions: np.ndarray
    mask: np.ndarray
    system_id: str
    channels: list[ChannelSpec]
    tree: list[tuple[str, str]] | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64).reshape(len(self.mask), -1)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(len(self.mask), -1)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.states.shape[0] != self.actions.shape[0]:
            raise ValueError("states and actions must share T")
        ns = sum(c.modality == "state" for c in self.channels)
        if ns != self.states.shape[1] or len(self.channels) - ns != self.actions.shape[1]:
            raise ValueError(f"episode {self.system_id}: channel specs do not match matrices")

    @property
    def T(self) -> int:
        return len(self.mask)

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    @property
    def state_channels(self) -> list[ChannelSpec]:
        return [c for c in self.channels if c.modality == "state"]

    @property
    def action_channels(self) -> list[ChannelSpec]:
        return [c for c in self.channels if c.modality == "action"]

    def layout(self) -> tuple:
        """Hashable channel layout; episodes with equal layouts can share a batch."""
        return tuple((c.name, c.modality, c.body_node) for c in self.channels), \
            tuple(map(tuple, self.tree or ()))


@dataclass
class DatasetSplit:
    train: list[TrajectoryEpisode]
    val: list[TrajectoryEpisode]
    test: list[TrajectoryEpisode]
    stats: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)


NormStats = dict[tuple[str, str], tuple[float, float]]


# -- statistics and normalisation ---------------------------------------------

def compute_norm_stats(episodes: Iterable[TrajectoryEpisode]) -> NormStats:
    """Per-(system, channel) min/max over unmasked steps."""
    lo: dict[tuple[str, str], float] = {}
    hi: dict[tuple[str, str], float] = {}
    seen: set[tuple[str, str]] = set()
    for ep in episodes:
        values = np.concatenate([ep.states, ep.actions], axis=1)[ep.mask]
        for j, ch in enumerate(_ordered(ep)):
            key = (ep.system_id, ch.name)
            seen.add(key)
            if values.shape[0] == 0:
                continue
            col = values[:, j]
            lo[key] = min(lo.get(key, np.inf), float(col.min()))
            hi[key] = max(hi.get(key, -np.inf), float(col.max()))
    missing = sorted(seen - set(lo))
    if missing:
        names = ", ".join(f"{sid}/{ch}" for sid, ch in missing)
        raise StatsError(f"no unmasked steps for channel(s) {names}")
    return {k: (lo[k], hi[k]) for k in sorted(lo)}


def _ordered(ep: TrajectoryEpisode) -> list[ChannelSpec]:
    return ep.state_channels + ep.action_channels


def channel_ranges(ep: TrajectoryEpisode, stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    """(mins, maxs) aligned with [states | actions] columns."""
    mins, maxs = [], []
    for ch in _ordered(ep):
        key = (ep.system_id, ch.name)
        if key not in stats:
            raise StatsError(f"missing stats for channel {ch.name!r} of {ep.system_id!r}")
        mins.append(stats[key][0])
        maxs.append(stats[key][1])
    return np.array(mins), np.array(maxs)


def normalize_values(x, mins, maxs) -> np.ndarray:
    """Affine map to [0, 1] with clamping; degenerate ranges map to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    span = maxs - mins
    degenerate = span <= 0
    safe = np.where(degenerate, 1.0, span)
    out = np.clip((x - mins) / safe, 0.0, 1.0)
    return np.where(degenerate, 0.5, out)


def denormalize_values(y, mins, maxs) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    span = maxs - mins
    return np.where(span <= 0, mins + 0.0 * y, mins + y * span)


def normalize(ep: TrajectoryEpisode, stats: NormStats) -> TrajectoryEpisode:
    mins, maxs = channel_ranges(ep, stats)
    ms = ep.states.shape[1]
    both = normalize_values(np.concatenate([ep.states, ep.actions], axis=1), mins, maxs)
    both[~ep.mask] = 0.0
    channels = [replace(c, norm_min=stats[(ep.system_id, c.name)][0],
                        norm_max=stats[(ep.system_id, c.name)][1]) for c in ep.channels]
    return replace(ep, states=both[:, :ms], actions=both[:, ms:], mask=ep.mask.copy(),
                   channels=channels)


def pad_clip(ep: TrajectoryEpisode, max_len: int = MAX_LEN) -> TrajectoryEpisode:
    """Truncate to ``max_len`` or zero-pad with mask=False rows."""
    if ep.T < 1:
        raise ValueError("episode must have at least one step")
    if ep.T >= max_len:
        return replace(ep, states=ep.states[:max_len].copy(), actions=ep.actions[:max_len].copy(),
                       mask=ep.mask[:max_len].copy())
    pad = max_len - ep.T
    states = np.vstack([np.where(ep.mask[:, None], ep.states, 0.0), np.zeros((pad, ep.states.shape[1]))])
    actions = np.vstack([np.where(ep.mask[:, None], ep.actions, 0.0), np.zeros((pad, ep.actions.shape[1]))])
    mask = np.concatenate([ep.mask, np.zeros(pad, dtype=bool)])
    return replace(ep, states=states, actions=actions, mask=mask)


def split_dataset(episodes: Sequence[TrajectoryEpisode], fractions=(0.7, 0.15, 0.15),
                  seed: int = 0) -> DatasetSplit:
    """Per-system shuffled split; stats come from the train split only."""
    rng = np.random.default_rng(seed)
    by_system: dict[str, list[TrajectoryEpisode]] = {}
    for ep in episodes:
        by_system.setdefault(ep.system_id, []).append(ep)
    train, val, test = [], [], []
    for sid in sorted(by_system):
        eps = by_system[sid]
        order = rng.permutation(len(eps))
        n_train = max(1, int(round(fractions[0] * len(eps))))
        n_val = int(round(fractions[1] * len(eps)))
        train += [eps[i] for i in order[:n_train]]
        val += [eps[i] for i in order[n_train:n_train + n_val]]
        test += [eps[i] for i in order[n_train + n_val:]]
    return DatasetSplit(train, val, test, compute_norm_stats(train))


# -- synthetic systems --------------------------------------------------------

def star_tree(n_links: int) -> list[tuple[str, str]]:
    return [("base", "ROOT")] + [(f"link{i}", "base") for i in range(n_links)]


def _channels(n_states: int, n_actions: int, state_names=None, action_names=None,
              state_nodes=None, action_nodes=None) -> list[ChannelSpec]:
    state_names = state_names or [f"s{i}" for i in range(n_states)]
    action_names = action_names or [f"a{j}" for j in range(n_actions)]
    state_nodes = state_nodes or [f"link{i}" for i in range(n_states)]
    action_nodes = action_nodes or [f"link{j % n_states}" for j in range(n_actions)]
    return [ChannelSpec(n, "state", b) for n, b in zip(state_names, state_nodes)] + \
           [ChannelSpec(n, "action", b) for n, b in zip(action_names, action_nodes)]


def gen_linear_system(A, B, noise_std: float, episodes: int, T: int, seed: int,
                      init=None, system_id: str = "linear", hold: int = 1) -> list[TrajectoryEpisode]:
    """s[t+1] = A s[t] + B a[t] + noise, a ~ U[-1, 1], s[0] ~ U[-1, 1] unless ``init``.

    Each action draw is held for ``hold`` steps; marginals stay uniform but
    sustained inputs push the state further from the origin.
    """
    if hold < 1:
        raise ValueError("hold must be >= 1")
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    ms, ma = B.shape
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(episodes):
        s = np.empty((T, ms))
        a = np.repeat(rng.uniform(-1.0, 1.0, (-(-T // hold), ma)), hold, axis=0)[:T]
        s[0] = rng.uniform(-1.0, 1.0, ms) if init is None else np.asarray(init, dtype=np.float64)
        for t in range(T - 1):
            s[t + 1] = A @ s[t] + B @ a[t]
            if noise_std > 0:
                s[t + 1] += noise_std * rng.standard_normal(ms)
        out.append(TrajectoryEpisode(s, a, np.ones(T, dtype=bool), system_id,
                                     _channels(ms, ma), star_tree(ms)))
    return out


def _rollout_env(env: sim.Env, s0: np.ndarray, actions: np.ndarray) -> np.ndarray:
    s = np.empty((len(actions), env.state_dim))
    s[0] = s0
    for t in range(len(actions) - 1):
        s[t + 1] = env.dynamics(s[t], actions[t])
    return s


def gen_double_integrator(params: dict | None, episodes: int, T: int, dt: float, seed: int,
                          system_id: str = "double-integrator", init=None,
                          action_scale: float = 1.0) -> list[TrajectoryEpisode]:
    """x'' = a; x0 ~ U[-1, 1], v0 ~ U[-0.5, 0.5], a ~ action_scale * U[-1, 1]."""
    env = sim.DoubleIntegrator(dt=dt)
    rng = np.random.default_rng(seed)
    tree = [("mass", "ROOT")]
    channels = _channels(2, 1, ["x", "v"], ["a"], ["mass", "mass"], ["mass"])
    out = []
    for _ in range(episodes):
        s0 = np.array([rng.uniform(-1, 1), rng.uniform(-0.5, 0.5)])
        a = action_scale * rng.uniform(-1.0, 1.0, (T, 1))
        if init is not None:
            s0 = np.asarray(init, dtype=np.float64)
        out.append(TrajectoryEpisode(_rollout_env(env, s0, a), a, np.ones(T, dtype=bool),
                                     system_id, channels, tree))
    return out


def gen_pendulum(params: dict | None, episodes: int, T: int, dt: float, seed: int,
                 system_id: str = "pendulum", init=None,
                 action_scale: float = 1.0) -> list[TrajectoryEpisode]:
    """theta0 ~ U(-pi, pi], omega0 ~ U[-1, 1], a ~ action_scale * U[-1, 1].

    ``params`` are :class:`sim.PendulumParams` fields; torque is a * max_torque.
    """
    env = sim.Pendulum(dt=dt, params=sim.PendulumParams(**(params or {})))
    rng = np.random.default_rng(seed)
    tree = [("pivot", "ROOT"), ("rod", "pivot")]
    channels = _channels(2, 1, ["theta", "omega"], ["torque"], ["rod", "rod"], ["rod"])
    out = []
    for _ in range(episodes):
        s0 = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1, 1)])
        a = action_scale * rng.uniform(-1.0, 1.0, (T, 1))
        if init is not None:
            s0 = np.asarray(init, dtype=np.float64)
        out.append(TrajectoryEpisode(_rollout_env(env, s0, a), a, np.ones(T, dtype=bool),
                                     system_id, channels, tree))
    return out


def multi_system_params(n_systems: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(A, B) pairs; odd-indexed systems are sign-flipped copies of their predecessor."""
    rng = np.random.default_rng(seed)
    systems = []
    for i in range(n_systems):
        if i % 2 == 1:
            A, B = systems[-1]
            systems.append((-A, B.copy()))
            continue
        rho = rng.uniform(0.8, 0.95)
        phi = rng.uniform(0.0, 0.6)
        R = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
        psi = rng.uniform(0, 2 * np.pi)
        B = 0.3 * np.array([[np.cos(psi)], [np.sin(psi)]])
        systems.append((rho * R, B))
    return systems


def gen_multi_system(n_systems: int, seed: int, episodes_per_system: int = 64, T: int = 150,
                     noise_std: float = 0.0) -> dict[str, list[TrajectoryEpisode]]:
    """Distinct 2-state / 1-action linear systems labelled ``sys0 .. sys{n-1}``."""
    if n_systems < 1:
        raise ValueError("n_systems must be >= 1")
    out = {}
    for i, (A, B) in enumerate(multi_system_params(n_systems, seed)):
        sid = f"sys{i}"
        out[sid] = gen_linear_system(A, B, noise_std, episodes_per_system, T,
                                     seed=seed * 1000 + i, system_id=sid)
    return out


# -- file IO ------------------------------------------------------------------

def episode_to_record(ep: TrajectoryEpisode) -> dict:
    return {
        "system_id": ep.system_id,
        "channels": [{"name": c.name, "modality": c.modality, "body_node": c.body_node,
                      "min": c.norm_min, "max": c.norm_max} for c in ep.channels],
        "tree": [list(x) for x in ep.tree] if ep.tree is not None else None,
        "states": ep.states.tolist(),
        "actions": ep.actions.tolist(),
        "mask": ep.mask.tolist(),
    }


def episode_from_record(rec: dict) -> TrajectoryEpisode:
    channels = [ChannelSpec(c["name"], c["modality"], c.get("body_node", GLOBAL_NODE),
                            c.get("min"), c.get("max")) for c in rec["channels"]]
    ms = sum(c.modality == "state" for c in channels)
    T = len(rec["mask"])
    states = np.array(rec["states"], dtype=np.float64).reshape(T, ms)
    actions = np.array(rec["actions"], dtype=np.float64).reshape(T, len(channels) - ms)
    tree = [tuple(x) for x in rec["tree"]] if rec.get("tree") is not None else None
    return TrajectoryEpisode(states, actions, np.array(rec["mask"], dtype=bool),
                             rec["system_id"], channels, tree)


def write_episodes(path, episodes: Iterable[TrajectoryEpisode]) -> None:
    with open(path, "w") as f:
        for ep in episodes:
            f.write(json.dumps(episode_to_record(ep)) + "\n")


def read_episodes(path) -> list[TrajectoryEpisode]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"episode file not found: {path}")
    with open(path) as f:
        return [episode_from_record(json.loads(line)) for line in f if line.strip()]


def write_stats(path, stats: NormStats) -> None:
    with open(path, "w") as f:
        f.write("system_id\tchannel\tmin\tmax\n")
        for (sid, name), (lo, hi) in sorted(stats.items()):
            f.write(f"{sid}\t{name}\t{lo!r}\t{hi!r}\n")


def read_stats(path) -> NormStats:
    stats = {}
    with open(path) as f:
        header = f.readline().rstrip("\n").split("\t")
        if header != ["system_id", "channel", "min", "max"]:
            raise StatsError(f"{path}: unexpected stats header {header}")
        for line in f:
            if line.strip():
                sid, name, lo, hi = line.rstrip("\n").split("\t")
                stats[(sid, name)] = (float(lo), float(hi))
    return stats
