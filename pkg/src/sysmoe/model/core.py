"""The mixture-of-experts trajectory world model.

Input windows hold ``L = h + k`` steps. History steps ``0 .. h-1`` carry
observed states; steps ``h .. L-1`` carry learnable query tokens. Actions are
known at every step. The output at step p is a distribution over the bins of
each state channel at step p + 1.

Each block runs, in order: self-attention across state channels within a
step, cross-attention from states to that step's actions, a causal selective
SSM along time per channel, a softmax router fed by the SSM's response to a
learnable system token, and a dense mixture of expert MLPs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import (ContractError, Tensor, broadcast_to, concat, dropout, log_softmax,
                        no_grad)
from ..structure import StructTables, structural_embedding
from ..tokenizer import ACTION, STATE, EmbeddingTables, TokenBatch, position_terms, value_embedding
from . import layers
from .config import ConfigError, ModelConfig


@dataclass
class ForwardResult:
    logp: Tensor  # (B, L, M_s, K)
    routing: list[np.ndarray]  # per block, (B, L, P)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp.data)


class SysMoEModel:
    def __init__(self, config: ModelConfig, seed: int = 0, backend: str | None = None):
        self.config = config
        self.backend = backend
        rng = np.random.default_rng(seed)
        c = config
        self.params: dict[str, Tensor] = {}
        tables = EmbeddingTables.init(c.K, c.d, c.L, c.max_channels, rng)
        for name, t in tables.named().items():
            self.params[f"embed.{name}"] = t
        struct = StructTables.init(c.d, c.max_objects, c.max_nodes, rng)
        for name, t in zip(("obj", "pre", "in", "post"), struct.tables()):
            self.params[f"struct.{name}"] = t
        self.params["queries"] = layers._param(rng.normal(0.0, 0.02, (c.k, c.d)))
        for i in range(c.n_blocks):
            self._add(f"block{i}.self", layers.init_attention(rng, c.d))
            self._add(f"block{i}.ln1", layers.init_layernorm(c.d))
            self._add(f"block{i}.cross", layers.init_attention(rng, c.d))
            self._add(f"block{i}.ln2", layers.init_layernorm(c.d))
            self._add(f"block{i}.ssm", layers.init_ssm(rng, c.d, c.d_inner, c.ssm_state, c.rank,
                                                       c.conv_width))
            n_experts = 1 if c.dense_ssm else c.P
            if not c.dense_ssm:
                self.params[f"block{i}.system"] = layers._param(rng.normal(0.0, 0.02, c.d))
                self._add(f"block{i}.router", layers.init_router(c.d, c.P))
            self._add(f"block{i}.experts", layers.init_experts(rng, c.d, c.expert_hidden, n_experts))
            self._add(f"block{i}.ln3", layers.init_layernorm(c.d))
        self.params["decoder.w"] = layers.init_linear(rng, c.d, c.K)
        self.params["decoder.b"] = layers._param(np.zeros(c.K))

    def _add(self, prefix: str, group: dict[str, Tensor]) -> None:
        for name, t in group.items():
            self.params[f"{prefix}.{name}"] = t

    def group(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    @property
    def tables(self) -> EmbeddingTables:
        g = self.group("embed")
        return EmbeddingTables(g["value_w"], g["value_b"], g["time"], g["channel"], g["modality"])

    @property
    def struct_tables(self) -> StructTables:
        g = self.group("struct")
        return StructTables(g["obj"], g["pre"], g["in"], g["post"])

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # -- forward ------------------------------------------------------------

    def embed(self, batch: TokenBatch) -> tuple[Tensor, Tensor]:
        c = self.config
        B, L, Ms = batch.bins.shape
        Ma = batch.n_action
        if L != c.L:
            raise ContractError(f"window length {L} != h + k = {c.L}")
        M = Ms + Ma
        if M > c.max_channels:
            raise ConfigError(f"{M} channels exceed max_channels={c.max_channels}")
        if np.any(batch.bins < 0) or np.any(batch.bins >= c.K) or np.any(batch.action_bins < 0) \
                or np.any(batch.action_bins >= c.K):
            raise ContractError("token bins outside [0, K); inputs must be normalised")
        struct = None
        if not c.no_struct_embed:
            struct = structural_embedding(batch.struct_idx, self.struct_tables)
        tables = self.tables
        modality = np.array([STATE] * Ms + [ACTION] * Ma)
        pos = position_terms(tables, L, range(M), modality, struct)  # (L, M, d)
        hist = value_embedding(tables, batch.bins[:, :c.h])  # (B, h, Ms, d)
        queries = broadcast_to(self.params["queries"].reshape(1, c.k, 1, c.d), (B, c.k, Ms, c.d))
        S = concat([hist, queries], axis=1) + pos[:, :Ms]
        A = value_embedding(tables, batch.action_bins) + pos[:, Ms:]
        return S, A

    def block(self, i: int, S: Tensor, A: Tensor, training: bool, rng) -> tuple[Tensor, Tensor]:
        c = self.config
        p = lambda name: self.group(f"block{i}.{name}")  # noqa: E731
        B, L, Ms, d = S.shape
        Ma = A.shape[2]
        drop = lambda x: dropout(x, c.dropout, rng, training)  # noqa: E731

        s = S.reshape(B * L, Ms, d)
        s = layers.apply_layernorm(s + drop(layers.multi_head_attention(s, s, p("self"), c.n_heads)),
                                   p("ln1"))
        if Ma > 0:
            a = A.reshape(B * L, Ma, d)
            s = s + drop(layers.multi_head_attention(s, a, p("cross"), c.n_heads))
        s = layers.apply_layernorm(s, p("ln2"))

        x = s.reshape(B, L, Ms, d).transpose(0, 2, 1, 3).reshape(B * Ms, L, d)
        system = None if c.dense_ssm else self.params[f"block{i}.system"]
        out, out_sys = layers.ssm_mixer(x, p("ssm"), system, self.backend)
        U = x + out
        rows = U.reshape(B * Ms * L, d)
        if c.dense_ssm:
            w = Tensor(np.ones((B, L, 1)))
            mixed = layers.moe_mix(rows, Tensor(np.ones(1)), p("experts"))
        else:
            u_sys = (out_sys + system).reshape(B, Ms, L, d).mean(axis=1)
            w = layers.route(u_sys, p("router"))  # (B, L, P)
            w_rows = broadcast_to(w.reshape(B, 1, L, c.P), (B, Ms, L, c.P)).reshape(B * Ms * L, c.P)
            mixed = layers.moe_mix(rows, w_rows, p("experts"))
        Y = layers.apply_layernorm(rows + drop(mixed), p("ln3"))
        Y = Y.reshape(B, Ms, L, d).transpose(0, 2, 1, 3)
        return Y, w

    def forward(self, batch: TokenBatch, training: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        S, A = self.embed(batch)
        routing = []
        for i in range(self.config.n_blocks):
            S, w = self.block(i, S, A, training, rng)
            routing.append(w.data)
        logits = S @ self.params["decoder.w"] + self.params["decoder.b"]
        return ForwardResult(log_softmax(logits, axis=-1), routing)

    def predict(self, batch: TokenBatch) -> ForwardResult:
        with no_grad():
            return self.forward(batch, training=False)

    def loss(self, batch: TokenBatch, training: bool = False, rng=None) -> tuple[Tensor, ForwardResult]:
        from .losses import ce_loss, next_step_targets
        res = self.forward(batch, training, rng)
        logp, targets, valid = next_step_targets(res.logp, batch)
        return ce_loss(logp, targets, valid), res

    def copy(self) -> "SysMoEModel":
        other = SysMoEModel.__new__(SysMoEModel)
        other.config = self.config
        other.backend = self.backend
        other.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return other

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ConfigError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, v in state.items():
            if k not in self.params:
                continue
            if self.params[k].shape != np.shape(v):
                raise ConfigError(f"shape mismatch for {k}: {self.params[k].shape} vs {np.shape(v)}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}
