"""K-bin discretisation of normalised channels and additive token embeddings.

A token for channel m at step t is the sum of a value projection of its bin
one-hot, a time embedding, a channel-index embedding, a modality embedding
and the structural embedding of the channel's body node. Channel indices run
over states first, then actions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import TrajectoryEpisode
from .numerics import ContractError, Tensor, add, as_tensor, stack, take_rows

STATE, ACTION = 0, 1


def discretize(x, K: int) -> np.ndarray:
    """Bin index ``min(floor(x K), K - 1)``; inputs are clipped to [0, 1] first."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.minimum(np.floor(x * K), K - 1).astype(np.int64)


def bin_center(index, K: int) -> np.ndarray:
    idx = np.asarray(index)
    if np.any(idx < 0) or np.any(idx >= K):
        raise ContractError(f"bin index out of range [0, {K})")
    return (idx + 0.5) / K


def bin_centers(K: int) -> np.ndarray:
    return (np.arange(K) + 0.5) / K


def one_hot(index, K: int) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= K):
        raise ContractError(f"bin index out of range [0, {K})")
    return (idx[..., None] == np.arange(K)).astype(np.float64)


def decode_distribution(p, argmax: bool = False, atol: float = 1e-6) -> np.ndarray:
    """Point estimate from distributions over the last axis.

    Expectation over bin centres by default; ``argmax`` returns the centre of
    the most probable bin instead.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -atol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ContractError("decode_distribution expects simplex rows (sum 1 within 1e-6)")
    K = p.shape[-1]
    if argmax:
        return bin_center(p.argmax(axis=-1), K)
    return p @ bin_centers(K)


@dataclass
class EmbeddingTables:
    value_w: Tensor  # (K, d): value projection of a one-hot is a row lookup
    value_b: Tensor  # (d,)
    time: Tensor  # (n_positions, d)
    channel: Tensor  # (max_channels, d)
    modality: Tensor  # (2, d)

    @classmethod
    def init(cls, K: int, d: int, n_positions: int, max_channels: int,
             rng: np.random.Generator, std: float = 0.02) -> "EmbeddingTables":
        p = lambda *shape: Tensor(rng.normal(0.0, std, shape), requires_grad=True)  # noqa: E731
        return cls(p(K, d), Tensor(np.zeros(d), requires_grad=True),
                   p(n_positions, d), p(max_channels, d), p(2, d))

    def named(self) -> dict[str, Tensor]:
        return {"value_w": self.value_w, "value_b": self.value_b, "time": self.time,
                "channel": self.channel, "modality": self.modality}

    @property
    def d(self) -> int:
        return self.value_w.shape[1]

    @property
    def K(self) -> int:
        return self.value_w.shape[0]


def value_embedding(tables: EmbeddingTables, bins) -> Tensor:
    return add(take_rows(tables.value_w, bins), tables.value_b)


def position_terms(tables: EmbeddingTables, n_steps: int, channel_ids: Sequence[int],
                   modalities: Sequence[int], struct: Tensor | None) -> Tensor:
    """(T, M, d) sum of time, channel, modality and structural summands."""
    t = take_rows(tables.time, np.arange(n_steps))[:, None, :]
    c = take_rows(tables.channel, np.asarray(channel_ids)) + take_rows(tables.modality, np.asarray(modalities))
    if struct is not None:
        c = c + struct
    return t + c[None, :, :]


@dataclass
class TokenGrid:
    targets: np.ndarray  # (T, M_s) bin indices of state channels
    input_embeds: Tensor  # (T, M, d)
    k_bins: int
    modality: np.ndarray  # (M,) STATE / ACTION


def embed(episode: TrajectoryEpisode, tables: EmbeddingTables, struct_embeds) -> TokenGrid:
    """Tokenise every step of a normalised episode.

    ``struct_embeds`` maps body-node name to a d-vector (array or Tensor), or
    is None to drop the structural summand.
    """
    if np.any(episode.states < 0) or np.any(episode.states > 1) \
            or np.any(episode.actions < 0) or np.any(episode.actions > 1):
        raise ContractError("embed expects a normalised episode (values in [0, 1])")
    K = tables.K
    values = np.concatenate([episode.states, episode.actions], axis=1)
    bins = discretize(values, K)
    channels = episode.state_channels + episode.action_channels
    modality = np.array([STATE if c.modality == "state" else ACTION for c in channels])
    struct = None
    if struct_embeds is not None:
        missing = [c.body_node for c in channels if c.body_node not in struct_embeds]
        if missing:
            raise ValueError(f"no structural embedding for body node {missing[0]!r}")
        struct = stack([as_tensor(struct_embeds[c.body_node]) for c in channels], axis=0)
    emb = value_embedding(tables, bins) + position_terms(tables, episode.T, range(len(channels)),
                                                         modality, struct)
    return TokenGrid(bins[:, :episode.states.shape[1]], emb, K, modality)


# -- window batches -----------------------------------------------------------

@dataclass
class TokenBatch:
    """Windows of h + k steps sharing one channel layout.

    ``values`` are normalised states for every window position (the model
    only reads the first h); ``bins`` are their bin indices.
    """
    values: np.ndarray  # (B, L, M_s)
    bins: np.ndarray  # (B, L, M_s)
    action_bins: np.ndarray  # (B, L, M_a)
    mask: np.ndarray  # (B, L)
    struct_idx: np.ndarray  # (M_s + M_a, 4)
    system_ids: list[str]
    episode_ids: list[int]

    @property
    def n_state(self) -> int:
        return self.bins.shape[2]

    @property
    def n_action(self) -> int:
        return self.action_bins.shape[2]

    def __len__(self) -> int:
        return self.bins.shape[0]


def window_starts(mask: np.ndarray, L: int, stride: int = 1) -> list[int]:
    """Offsets of length-L windows that fit inside the episode and start on a real step."""
    T = len(mask)
    return [s for s in range(0, max(T - L + 1, 0), stride) if mask[s]]


def make_windows(episodes: Sequence[TrajectoryEpisode], L: int, K: int, struct_idx: np.ndarray,
                 starts: Sequence[tuple[int, int]] | None = None, stride: int = 1) -> TokenBatch:
    """Cut normalised episodes into length-L windows.

    ``starts`` lists (episode index, offset) pairs; by default every valid
    offset at ``stride`` is used.
    """
    if starts is None:
        starts = [(i, s) for i, ep in enumerate(episodes) for s in window_starts(ep.mask, L, stride)]
    vals, acts, masks, sids, eids = [], [], [], [], []
    for i, s in starts:
        ep = episodes[i]
        if s + L > ep.T:
            raise ContractError(f"window [{s}, {s + L}) exceeds episode length {ep.T}")
        vals.append(ep.states[s:s + L])
        acts.append(ep.actions[s:s + L])
        masks.append(ep.mask[s:s + L])
        sids.append(ep.system_id)
        eids.append(i)
    ms = episodes[0].states.shape[1]
    ma = episodes[0].actions.shape[1]
    values = np.array(vals).reshape(len(vals), L, ms)
    actions = np.array(acts).reshape(len(acts), L, ma)
    return TokenBatch(values, discretize(values, K), discretize(actions, K),
                      np.array(masks, dtype=bool).reshape(len(masks), L), np.asarray(struct_idx),
                      sids, eids)
