"""Rollout metrics, routing dumps, environment-scaling and few-shot harnesses.

All prediction errors are computed in normalised [0, 1] space.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data
from .data import TrajectoryEpisode
from .model import ModelConfig, SysMoEModel
from .structure import channel_struct_indices
from .tokenizer import TokenBatch, decode_distribution, make_windows
from .training import TrainConfig, build_pools, subset, train

Predictor = Callable[[TokenBatch, int, int], np.ndarray]


# -- rollout metrics ----------------------------------------------------------

@dataclass
class RolloutReport:
    mae: float
    mse: float
    per_episode: list[dict]
    per_channel: list[dict]
    n_elements: int
    n_skipped: int
    n_clamped: int
    argmax_mae: float | None = None
    argmax_mse: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def model_predictor(model: SysMoEModel, argmax: bool = False) -> Predictor:
    """Normalised k-step predictions (B, k, M_s) from one forward pass."""
    def predict(batch: TokenBatch, h: int, k: int) -> np.ndarray:
        probs = model.predict(batch).probs[:, h - 1:h - 1 + k]
        return decode_distribution(probs, argmax=argmax)
    return predict


def persistence_predictor(batch: TokenBatch, h: int, k: int) -> np.ndarray:
    """Repeat the last observed state for all k future steps."""
    return np.repeat(batch.values[:, h - 1:h], k, axis=1)


def _struct_for(ep: TrajectoryEpisode) -> np.ndarray:
    return channel_struct_indices([c.body_node for c in ep.state_channels + ep.action_channels], ep.tree)


def evaluate_rollout(model, episodes: Sequence[TrajectoryEpisode], h: int | None = None,
                     k: int | None = None, stats=None, argmax: bool = False, both: bool = False,
                     start: int = 0, K: int | None = None) -> RolloutReport:
    """k-step prediction errors from a single forward pass per episode.

    ``model`` is a :class:`SysMoEModel` or a predictor callable
    ``(batch, h, k) -> (B, k, M_s)``. Episodes are normalised with ``stats``
    when given (and clamped values counted); otherwise they must already be
    normalised. The window starts at ``start``; episodes without h + k real
    steps there are skipped and counted.
    """
    if isinstance(model, SysMoEModel):
        h = model.config.h if h is None else h
        k = model.config.k if k is None else k
        if (h, k) != (model.config.h, model.config.k):
            raise ValueError("h and k must match the model's window")
        K = model.config.K
        predict = model_predictor(model, argmax)
        alt = model_predictor(model, not argmax) if both else None
    else:
        predict, alt = model, None
        K = K or 256
    L = h + k
    per_episode, sq_all, abs_all, alt_sq, alt_abs, chan_err = [], [], [], [], [], {}
    skipped = clamped = 0
    for i, ep in enumerate(episodes):
        if ep.T < start + L or not ep.mask[start:start + L].all():
            skipped += 1
            continue
        if stats is not None:
            mins, maxs = data.channel_ranges(ep, stats)
            raw = ep.states[start + h:start + L]
            lo, hi = mins[:raw.shape[1]], maxs[:raw.shape[1]]
            clamped += int(((raw < lo) | (raw > hi)).sum())
            ep = data.normalize(ep, stats)
        batch = make_windows([ep], L, K, _struct_for(ep), starts=[(0, start)])
        pred = predict(batch, h, k)[0]
        truth = ep.states[start + h:start + L]
        err = pred - truth
        per_episode.append({"episode": i, "system_id": ep.system_id,
                            "mae": float(np.abs(err).mean()), "mse": float((err * err).mean())})
        abs_all.append(np.abs(err))
        sq_all.append(err * err)
        for m, ch in enumerate(ep.state_channels):
            chan_err.setdefault((ep.system_id, ch.name), []).append(err[:, m])
        if alt is not None:
            e2 = alt(batch, h, k)[0] - truth
            alt_abs.append(np.abs(e2))
            alt_sq.append(e2 * e2)
    if not abs_all:
        return RolloutReport(math.nan, math.nan, [], [], 0, skipped, clamped)
    flat_abs = np.concatenate([a.ravel() for a in abs_all])
    flat_sq = np.concatenate([a.ravel() for a in sq_all])
    per_channel = [{"system_id": s, "channel": c, "mae": float(np.abs(np.concatenate(v)).mean()),
                    "mse": float((np.concatenate(v) ** 2).mean())}
                   for (s, c), v in sorted(chan_err.items())]
    report = RolloutReport(float(flat_abs.mean()), float(flat_sq.mean()), per_episode, per_channel,
                           int(flat_abs.size), skipped, clamped)
    if alt is not None:
        a_abs = float(np.concatenate([a.ravel() for a in alt_abs]).mean())
        a_sq = float(np.concatenate([a.ravel() for a in alt_sq]).mean())
        if argmax:
            report.argmax_mae, report.argmax_mse = report.mae, report.mse
            report.mae, report.mse = a_abs, a_sq
        else:
            report.argmax_mae, report.argmax_mse = a_abs, a_sq
    return report


# -- routing ------------------------------------------------------------------

@dataclass
class RoutingDump:
    systems: list[str]
    weights: np.ndarray  # (n_systems, n_blocks, P)

    def rows(self) -> list[dict]:
        out = []
        for s, sid in enumerate(self.systems):
            for b in range(self.weights.shape[1]):
                row = {"system_id": sid, "block": b}
                row.update({f"expert{p}": float(w) for p, w in enumerate(self.weights[s, b])})
                out.append(row)
        return out

    def max_difference(self, a: str, b: str) -> float:
        ia, ib = self.systems.index(a), self.systems.index(b)
        return float(np.abs(self.weights[ia] - self.weights[ib]).max())


def dump_routing(model: SysMoEModel, episodes_by_system: dict[str, Sequence[TrajectoryEpisode]],
                 stride: int | None = None) -> RoutingDump:
    """Mean routing weights per system and block over all real window positions."""
    c = model.config
    stride = stride or c.L
    systems = sorted(episodes_by_system)
    grid = np.zeros((len(systems), c.n_blocks, 1 if c.dense_ssm else c.P))
    for s, sid in enumerate(systems):
        pools = build_pools(episodes_by_system[sid], c.L, c.K, stride)
        total = np.zeros(grid.shape[1:])
        count = 0.0
        for pool in pools:
            for i in range(0, len(pool), 64):
                b = subset(pool, np.arange(i, min(i + 64, len(pool))))
                res = model.predict(b)
                m = b.mask[:, :, None].astype(np.float64)
                for blk, w in enumerate(res.routing):
                    total[blk] += (w * m).sum(axis=(0, 1))
                count += m.sum()
        grid[s] = total / max(count, 1.0)
    return RoutingDump(systems, grid)


# -- reports ------------------------------------------------------------------

def write_jsonl(path, records: Sequence[dict]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def write_tsv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w") as f:
        f.write("\t".join(columns) + "\n")
        for r in rows:
            f.write("\t".join(_fmt(r.get(c)) for c in columns) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_tsv(path) -> list[dict]:
    with open(path) as f:
        header = f.readline().rstrip("\n").split("\t")
        return [dict(zip(header, line.rstrip("\n").split("\t"))) for line in f if line.strip()]


# -- scaling harness ----------------------------------------------------------

def dense_matched_config(cfg: ModelConfig, tol: float = 0.05) -> ModelConfig:
    """Dense single-expert config whose parameter count is within ``tol`` of ``cfg``.

    Extra depth absorbs the budget freed by dropping experts and the router:
    among depths whose best-fitting expert width lands within ``tol``, the one
    keeping the width closest to the original is chosen.
    """
    target = _count(cfg)
    candidates = []
    for nb in range(cfg.n_blocks, 4 * cfg.n_blocks + 1):
        lo, hi = 1, 16 * cfg.expert_hidden
        while lo < hi:
            mid = (lo + hi) // 2
            if _count(cfg.with_(dense_ssm=True, n_blocks=nb, expert_hidden=mid)) < target:
                lo = mid + 1
            else:
                hi = mid
        for hidden in {max(lo - 1, 1), lo}:
            cand = cfg.with_(dense_ssm=True, n_blocks=nb, expert_hidden=hidden)
            gap = abs(_count(cand) / target - 1.0)
            if gap <= tol:
                candidates.append((abs(hidden - cfg.expert_hidden), gap, nb, cand))
    if not candidates:
        raise ValueError(f"no dense config within {tol:.0%} of {target} parameters")
    return min(candidates, key=lambda c: c[:3])[3]


def _count(cfg: ModelConfig) -> int:
    return SysMoEModel(cfg, 0).n_params()


@dataclass
class ScalingRow:
    n_systems: int
    variant: str
    seed: int
    n_params: int
    test_mae: float
    test_mse: float
    best_val_ce: float
    steps: int


def prepare_multi_system(n: int, seed: int, episodes_per_system: int, T: int,
                         fractions=(0.7, 0.15, 0.15)) -> tuple[data.DatasetSplit, dict]:
    """Generated, split and normalised multi-system data (stats from train only)."""
    by_sys = data.gen_multi_system(n, seed, episodes_per_system, T)
    split = data.split_dataset([e for sid in sorted(by_sys) for e in by_sys[sid]], fractions, seed)
    norm = lambda eps: [data.normalize(e, split.stats) for e in eps]  # noqa: E731
    return data.DatasetSplit(norm(split.train), norm(split.val), norm(split.test), split.stats), by_sys


def scaling_harness(n_values: Sequence[int], base_config: ModelConfig, train_cfg: TrainConfig,
                    seeds: Sequence[int] = (0, 1, 2), episodes_per_system: int = 32, T: int = 64,
                    out_dir=None, log: Callable[[str], None] | None = None) -> list[ScalingRow]:
    """Train the routed and dense variants per N under equal parameter and step budgets."""
    moe_cfg = base_config.with_(dense_ssm=False)
    dense_cfg = dense_matched_config(moe_cfg)
    n_moe, n_dense = _count(moe_cfg), _count(dense_cfg)
    if abs(n_dense / n_moe - 1.0) > 0.05:
        raise AssertionError(f"parameter budgets differ: {n_moe} vs {n_dense}")
    rows = []
    for n in n_values:
        for seed in seeds:
            split, _ = prepare_multi_system(n, seed, episodes_per_system, T)
            for variant, cfg in (("sysmoe", moe_cfg), ("dense", dense_cfg)):
                model = SysMoEModel(cfg, seed=seed)
                tc = TrainConfig(**{**asdict(train_cfg), "seed": seed})
                res = train(model, split.train, split.val, tc)
                rep = evaluate_rollout(model, split.test)
                row = ScalingRow(n, variant, seed, model.n_params(), rep.mae, rep.mse,
                                 res.best_val, res.steps)
                rows.append(row)
                if log:
                    log(f"N={n} seed={seed} {variant}: params={row.n_params} "
                        f"test_mse={row.test_mse:.5f} val_ce={row.best_val_ce:.4f}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = [f.name for f in ScalingRow.__dataclass_fields__.values()]
        write_tsv(out / "scaling.tsv", [asdict(r) for r in rows], cols)
        write_tsv(out / "scaling_summary.tsv", summarize_scaling(rows),
                  ["n_systems", "variant", "n_seeds", "mse_mean", "mse_std", "mae_mean", "mae_std"])
    return rows


def summarize_scaling(rows: Sequence[ScalingRow]) -> list[dict]:
    out = []
    keys = sorted({(r.n_systems, r.variant) for r in rows})
    for n, v in keys:
        sel = [r for r in rows if r.n_systems == n and r.variant == v]
        mse = np.array([r.test_mse for r in sel])
        mae = np.array([r.test_mae for r in sel])
        out.append({"n_systems": n, "variant": v, "n_seeds": len(sel),
                    "mse_mean": float(mse.mean()), "mse_std": float(mse.std()),
                    "mae_mean": float(mae.mean()), "mae_std": float(mae.std())})
    return out


# -- few-shot curves ----------------------------------------------------------

@dataclass
class FewShotCurves:
    pretrained: list[tuple[int, float]] = field(default_factory=list)
    scratch: list[tuple[int, float]] = field(default_factory=list)

    def final_gap(self) -> float:
        """Scratch minus pretrained final validation MSE (positive favours pretraining)."""
        return self.scratch[-1][1] - self.pretrained[-1][1]


def _curve(history: list[dict]) -> list[tuple[int, float]]:
    return [(h["step"], h["val_mse"]) for h in history if h.get("event") == "eval"]


def fewshot_curves(pretrained: SysMoEModel, scratch_config: ModelConfig,
                   target_train: Sequence[TrajectoryEpisode], target_val: Sequence[TrajectoryEpisode],
                   train_cfg: TrainConfig, n_episodes: int = 10, out_dir=None) -> FewShotCurves:
    """Fine-tune a pretrained copy and a fresh model on the same few episodes.

    Both runs share seed and data order; validation MSE is logged at every
    eval point including step 0. Early stopping is disabled so curves align.
    """
    episodes = list(target_train)[:n_episodes]
    tc = TrainConfig(**{**asdict(train_cfg), "eval_at_start": True, "patience": 10 ** 9})
    a = train(pretrained.copy(), episodes, target_val, tc)
    b = train(SysMoEModel(scratch_config, seed=train_cfg.seed), episodes, target_val, tc)
    curves = FewShotCurves(_curve(a.history), _curve(b.history))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = [{"step": s, "pretrained_val_mse": p, "scratch_val_mse": q}
                for (s, p), (_, q) in zip(curves.pretrained, curves.scratch)]
        write_tsv(out / "fewshot.tsv", rows, ["step", "pretrained_val_mse", "scratch_val_mse"])
    return curves
