"""Optimisation: warmup-cosine AdamW with clipping, early stopping and distillation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import TrajectoryEpisode
from .model import ModelConfig, SysMoEModel, kd_loss, next_step_targets, save_checkpoint
from .model.config import ConfigError
from .model.losses import ce_loss
from .numerics import backward, no_grad
from .structure import channel_struct_indices
from .tokenizer import TokenBatch, decode_distribution, make_windows


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class TrainConfig:
    lr: float = 2e-4
    warmup: int = 200
    total_steps: int = 5000
    batch_size: int = 16
    weight_decay: float = 1e-5
    clip_norm: float = 0.25
    seed: int = 0
    patience: int = 10
    eval_interval: int = 100
    eval_at_start: bool = False
    log_interval: int = 50
    stride: int = 1
    max_val_windows: int = 512
    freeze: tuple[str, ...] = ()
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    target_train_ce: float | None = None  # stop once full train-set CE (eval mode) reaches this

    def __post_init__(self):
        if self.warmup > self.total_steps:
            raise ConfigError("warmup must not exceed total_steps")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.freeze = tuple(self.freeze)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak, then cosine decay peak -> 0 at ``total_steps``."""
    if step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    span = cfg.total_steps - cfg.warmup
    if span <= 0:
        return cfg.lr
    frac = min(1.0, (step - cfg.warmup) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by ``max_norm / norm`` when the global norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return grads, norm


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place AdamW update of ``params[name].data`` for every name in ``grads``."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- parameter groups ---------------------------------------------------------

def param_groups(model: SysMoEModel) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {"embeddings": [], "queries": [], "decoder": []}
    for i in range(model.config.n_blocks):
        groups[f"block{i}"] = []
    for name in model.params:
        head = name.split(".", 1)[0]
        if head in ("embed", "struct"):
            groups["embeddings"].append(name)
        elif head in groups:
            groups[head].append(name)
        else:
            raise ConfigError(f"parameter {name} belongs to no group")
    return groups


def apply_freeze_mask(model: SysMoEModel, mask: Sequence[str]) -> list[str]:
    """Names of trainable parameters after freezing ``mask`` groups.

    ``"all"`` freezes everything; ``"last:j"`` is shorthand for freezing every
    block except the last j.
    """
    groups = param_groups(model)
    frozen: set[str] = set()
    for entry in mask:
        if entry == "all":
            frozen.update(model.params)
        elif entry.startswith("last:"):
            j = int(entry.split(":", 1)[1])
            for i in range(model.config.n_blocks - j):
                frozen.update(groups[f"block{i}"])
        elif entry in groups:
            frozen.update(groups[entry])
        else:
            raise ConfigError(f"unknown freeze group {entry!r}; groups are {sorted(groups)}")
    return [n for n in model.params if n not in frozen]


def tune_last_blocks_mask(model: SysMoEModel, j: int) -> list[str]:
    """Freeze mask that leaves the last ``j`` blocks, queries and decoder trainable."""
    return ["embeddings"] + [f"block{i}" for i in range(model.config.n_blocks - j)]


# -- batching -----------------------------------------------------------------

def build_pools(episodes: Sequence[TrajectoryEpisode], L: int, K: int,
                stride: int = 1) -> list[TokenBatch]:
    """All training windows, one pool per channel layout."""
    by_layout: dict[tuple, list[TrajectoryEpisode]] = {}
    for ep in episodes:
        by_layout.setdefault(ep.layout(), []).append(ep)
    pools = []
    for layout in sorted(by_layout, key=repr):
        eps = by_layout[layout]
        sidx = channel_struct_indices([c.body_node for c in eps[0].state_channels + eps[0].action_channels],
                                      eps[0].tree)
        batch = make_windows(eps, L, K, sidx, stride=stride)
        if len(batch):
            pools.append(batch)
    if not pools:
        raise ValueError(f"no episode is long enough for windows of {L} steps")
    return pools


def subset(batch: TokenBatch, idx) -> TokenBatch:
    idx = np.asarray(idx)
    return TokenBatch(batch.values[idx], batch.bins[idx], batch.action_bins[idx], batch.mask[idx],
                      batch.struct_idx, [batch.system_ids[i] for i in idx],
                      [batch.episode_ids[i] for i in idx])


def epoch_batches(pools: list[TokenBatch], batch_size: int, rng: np.random.Generator):
    """One shuffled pass: within-pool permutation, then shuffled batch order."""
    chunks = []
    for p, pool in enumerate(pools):
        order = rng.permutation(len(pool))
        chunks += [(p, order[i:i + batch_size]) for i in range(0, len(order), batch_size)]
    for j in rng.permutation(len(chunks)):
        p, idx = chunks[j]
        yield subset(pools[p], idx)


def cap_pool(pools: list[TokenBatch], max_windows: int) -> list[TokenBatch]:
    """Evenly thinned pools with at most ``max_windows`` windows in total."""
    total = sum(len(p) for p in pools)
    if total <= max_windows:
        return pools
    keep = max_windows / total
    out = []
    for pool in pools:
        n = max(1, int(len(pool) * keep))
        out.append(subset(pool, np.linspace(0, len(pool) - 1, n).round().astype(int)))
    return out


def evaluate_ce(model: SysMoEModel, pools: list[TokenBatch],
                chunk: int = 64) -> tuple[float, float, float]:
    """(CE, MAE, MSE) over next-step pairs; errors use the expectation decode."""
    ce_sum = mae_sum = mse_sum = 0.0
    n = 0
    with no_grad():
        for pool in pools:
            for i in range(0, len(pool), chunk):
                b = subset(pool, np.arange(i, min(i + chunk, len(pool))))
                res = model.forward(b, training=False)
                logp, targets, valid = next_step_targets(res.logp, b)
                cnt = int(np.broadcast_to(valid, targets.shape).sum())
                if cnt == 0:
                    continue
                ce_sum += ce_loss(logp, targets, valid).item() * cnt
                pred = decode_distribution(np.exp(logp.data))
                err = (pred - b.values[:, 1:]) * valid
                mae_sum += float(np.abs(err).sum())
                mse_sum += float((err * err).sum())
                n += cnt
    if n == 0:
        return float("nan"), float("nan"), float("nan")
    return ce_sum / n, mae_sum / n, mse_sum / n


def routing_entropy(routing: list[np.ndarray]) -> list[float]:
    out = []
    for w in routing:
        mean_w = w.reshape(-1, w.shape[-1]).mean(axis=0)
        out.append(float(-(mean_w * np.log(np.clip(mean_w, 1e-300, None))).sum()))
    return out


# -- main loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: SysMoEModel
    best_val: float
    best_step: int
    steps: int
    history: list[dict]
    stopped_early: bool
    initial_train_ce: float
    final_train_ce: float


def _json_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


def train(model: SysMoEModel, train_episodes: Sequence[TrajectoryEpisode],
          val_episodes: Sequence[TrajectoryEpisode] | None, cfg: TrainConfig,
          out_dir=None, teacher: SysMoEModel | None = None, alpha: float = 1.0,
          meta: dict | None = None) -> TrainResult:
    """Fit ``model`` on normalised episodes.

    Validation CE is computed every ``eval_interval`` steps (and at the end);
    the best-validation parameters are restored into ``model`` before return.
    With ``out_dir`` set, ``metrics.jsonl`` and ``best.ckpt`` are written;
    ``meta`` is merged into the checkpoint's metadata.
    """
    c = model.config
    rng = np.random.default_rng(cfg.seed)
    pools = build_pools(train_episodes, c.L, c.K, cfg.stride)
    val_pools = cap_pool(build_pools(val_episodes, c.L, c.K, 1), cfg.max_val_windows) \
        if val_episodes else None
    target_pools = cap_pool(pools, cfg.max_val_windows) if cfg.target_train_ce is not None else None
    trainable = apply_freeze_mask(model, cfg.freeze)
    n_total = model.n_params()
    frac = sum(model.params[n].data.size for n in trainable) / n_total
    state = OptimizerState()

    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "metrics.jsonl", "w")
    history: list[dict] = []

    def emit(rec):
        history.append(rec)
        if log is not None:
            log.write(json.dumps(rec, sort_keys=True) + "\n")

    best_val, best_step, best_state = math.inf, -1, model.state()
    bad_evals = 0
    stopped = False
    initial_ce = final_ce = math.nan
    step = 0
    last_train = math.nan
    emit({"event": "start", "trainable_fraction": frac, "n_params": n_total,
          "train_windows": sum(len(p) for p in pools), "config": _cfg_dict(cfg)})

    def run_eval(step_):
        nonlocal best_val, best_step, best_state, bad_evals
        if val_pools is None:
            return False
        val_ce, val_mae, val_mse = evaluate_ce(model, val_pools)
        improved = val_ce < best_val
        if improved:
            best_val, best_step, best_state = val_ce, step_, model.state()
            bad_evals = 0
        else:
            bad_evals += 1
        emit({"event": "eval", "step": step_, "val_ce": _json_float(val_ce),
              "val_mae": _json_float(val_mae), "val_mse": _json_float(val_mse),
              "best_val_ce": _json_float(best_val),
              "train_ce": _json_float(last_train)})
        return bad_evals >= cfg.patience

    try:
        if cfg.eval_at_start and run_eval(0):
            stopped = True
        reached = False
        while step < cfg.total_steps and not (stopped or reached):
            for batch in epoch_batches(pools, cfg.batch_size, rng):
                if step >= cfg.total_steps:
                    break
                for p in model.params.values():
                    p.grad = None
                res = model.forward(batch, training=True, rng=rng)
                logp, targets, valid = next_step_targets(res.logp, batch)
                if teacher is not None and alpha < 1.0:
                    with no_grad():
                        t_probs = np.exp(teacher.forward(batch, training=False).logp.data[:, :-1])
                    loss = kd_loss(logp, t_probs, targets, valid, alpha)
                else:
                    loss = ce_loss(logp, targets, valid)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at step {step}; "
                                        f"batch episodes {batch.episode_ids}")
                last_train = value
                if step == 0:
                    initial_ce = value
                grads_map = backward(loss)
                names = [n for n in trainable if model.params[n] in grads_map]
                clipped, norm = clip_gradients([grads_map[model.params[n]] for n in names],
                                               cfg.clip_norm)
                lr = lr_at(step + 1, cfg)
                if names:
                    adamw_step(model.params, dict(zip(names, clipped)), state, lr,
                               cfg.weight_decay, cfg.betas, cfg.eps)
                step += 1
                final_ce = value
                if step % cfg.log_interval == 0 or step == 1:
                    emit({"event": "train", "step": step, "train_ce": value, "lr": lr,
                          "grad_norm": norm, "routing_entropy": routing_entropy(res.routing)})
                if step % cfg.eval_interval == 0 and run_eval(step):
                    stopped = True
                    break
                if cfg.target_train_ce is not None and step % cfg.eval_interval == 0:
                    full_ce = evaluate_ce(model, target_pools)[0]
                    if full_ce <= cfg.target_train_ce:
                        emit({"event": "target", "step": step, "train_ce": full_ce})
                        reached = True
                        break
        if not stopped and val_pools is not None and step % cfg.eval_interval != 0:
            run_eval(step)
        if val_pools is not None:
            model.load_state(best_state)
        emit({"event": "end", "steps": step, "best_val_ce": _json_float(best_val),
              "best_step": best_step, "stopped_early": stopped})
    finally:
        if log is not None:
            log.close()
    if out is not None:
        save_checkpoint(out / "best.ckpt", model, {**(meta or {}), "best_val_ce": _json_float(best_val),
                                                   "best_step": best_step, "steps": step})
    return TrainResult(model, best_val, best_step, step, history, stopped, initial_ce, final_ce)


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["freeze"] = list(cfg.freeze)
    d["betas"] = list(cfg.betas)
    return d


def distill(teacher: SysMoEModel, student_config: ModelConfig, train_episodes, val_episodes,
            cfg: TrainConfig, alpha: float = 0.9, out_dir=None, seed: int | None = None,
            meta: dict | None = None) -> TrainResult:
    """Train a fresh student on ``alpha * CE + (1 - alpha) * soft CE`` against the teacher."""
    if teacher.config.K != student_config.K:
        raise ConfigError(f"teacher K={teacher.config.K} != student K={student_config.K}")
    if (teacher.config.h, teacher.config.k) != (student_config.h, student_config.k):
        raise ConfigError("teacher and student must share the window (h, k)")
    student = SysMoEModel(student_config, seed=cfg.seed if seed is None else seed,
                          backend=teacher.backend)
    return train(student, train_episodes, val_episodes, cfg, out_dir, teacher=teacher, alpha=alpha,
                 meta=meta)
