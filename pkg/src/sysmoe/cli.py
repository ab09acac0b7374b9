"""Command-line entry point: ``sysmoe <command> [--config FILE] [flags]``.

Every command resolves its configuration (defaults, then the config file,
then flags), writes the resolved echo to ``<out>/config.ini`` and only then
does any work. Exit codes: 0 success, 1 usage or configuration error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data, evaluation, planner, sim, structure, training
from .model import CheckpointError, ModelConfig, SysMoEModel, load_checkpoint
from .model.config import ConfigError, preset
from .runconfig import COMMAND_SECTIONS, RunConfig, RunConfigError, add_arguments, resolve

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

SPLITS = ("train", "val", "test")
DT = 0.02


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- shared helpers -----------------------------------------------------------

def _require(path, what: str) -> Path:
    if path is None:
        raise RunConfigError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise RunConfigError(f"{what} not found: {p}")
    return p


def _load_split(cfg: RunConfig, name: str) -> list[data.TrajectoryEpisode]:
    root = _require(cfg["dataset.dataset"], "dataset directory")
    return data.read_episodes(_require(root / f"{name}.jsonl", f"{name} split"))


def _load_stats(cfg: RunConfig) -> data.NormStats:
    root = _require(cfg["dataset.dataset"], "dataset directory")
    return data.read_stats(_require(root / "stats.tsv", "stats file"))


def dataset_meta(stats: data.NormStats, episode: data.TrajectoryEpisode) -> dict:
    """Checkpoint metadata that lets a model be used without its dataset."""
    return {
        "stats": [[sid, ch, lo, hi] for (sid, ch), (lo, hi) in sorted(stats.items())],
        "layout": {
            "system_id": episode.system_id,
            "channels": [[c.name, c.modality, c.body_node] for c in episode.channels],
            "tree": [list(p) for p in episode.tree] if episode.tree is not None else None,
        },
    }


def meta_stats(meta: dict) -> data.NormStats:
    if "stats" not in meta:
        raise CheckpointError("checkpoint carries no normalisation stats")
    return {(sid, ch): (float(lo), float(hi)) for sid, ch, lo, hi in meta["stats"]}


def layout_episode(meta: dict) -> data.TrajectoryEpisode:
    """A one-step placeholder episode carrying the checkpoint's channel layout."""
    if "layout" not in meta:
        raise CheckpointError("checkpoint carries no channel layout")
    lay = meta["layout"]
    channels = [data.ChannelSpec(n, m, b) for n, m, b in lay["channels"]]
    ms = sum(c.modality == "state" for c in channels)
    tree = [tuple(p) for p in lay["tree"]] if lay["tree"] is not None else None
    return data.TrajectoryEpisode(np.zeros((1, ms)), np.zeros((1, len(channels) - ms)),
                                  np.ones(1, dtype=bool), lay["system_id"], channels, tree)


def model_config(cfg: RunConfig) -> ModelConfig:
    base = preset(cfg["model.preset"])
    overrides = {k: v for k, v in cfg.section("model").items() if k != "preset" and v is not None}
    return base.with_(**overrides)


def train_config(cfg: RunConfig) -> training.TrainConfig:
    t = cfg.section("train")
    freeze = tuple(x.strip() for x in t["freeze"].split(",") if x.strip()) if t["freeze"] else ()
    return training.TrainConfig(lr=t["lr"], warmup=t["warmup"], total_steps=t["total_steps"],
                                batch_size=t["batch_size"], seed=cfg.seed, patience=t["patience"],
                                eval_interval=t["eval_interval"], stride=t["stride"],
                                max_val_windows=t["max_val_windows"], freeze=freeze)


def _normed(episodes, stats):
    return [data.normalize(e, stats) for e in episodes]


# -- commands -----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> None:
    g = cfg.section("gen")
    kind, n, T, seed = g["kind"], g["episodes"], g["length"], cfg.seed
    if kind == "linear":
        eps = data.gen_linear_system(0.9 * np.eye(2), 0.1 * np.eye(2), g["noise"], n, T, seed,
                                     hold=g["hold"])
    elif kind == "pendulum":
        eps = data.gen_pendulum(None, n, T, DT, seed)
    elif kind == "double-integrator":
        eps = data.gen_double_integrator(None, n, T, DT, seed)
    else:
        by_sys = data.gen_multi_system(g["systems"], seed, n, T, g["noise"])
        eps = [e for sid in sorted(by_sys) for e in by_sys[sid]]
    split = data.split_dataset(eps, seed=seed)
    for name, part in zip(SPLITS, (split.train, split.val, split.test)):
        data.write_episodes(cfg.out / f"{name}.jsonl", part)
    data.write_stats(cfg.out / "stats.tsv", split.stats)
    systems = sorted({e.system_id for e in eps})
    print(f"wrote {len(eps)} episodes (train {len(split.train)}, val {len(split.val)}, "
          f"test {len(split.test)}) for {len(systems)} system(s): {', '.join(systems)}; seed {seed}")


def _train_inputs(cfg: RunConfig):
    stats = _load_stats(cfg)
    tr, va = _load_split(cfg, "train"), _load_split(cfg, "val")
    if not tr:
        raise RunConfigError("train split is empty")
    return stats, _normed(tr, stats), _normed(va, stats), dataset_meta(stats, tr[0])


def cmd_train(cfg: RunConfig) -> None:
    stats, tr, va, meta = _train_inputs(cfg)
    tc = train_config(cfg)
    if cfg["train.init"]:
        model, _ = load_checkpoint(_require(cfg["train.init"], "init checkpoint"))
    else:
        model = SysMoEModel(model_config(cfg), seed=cfg.seed)
    res = training.train(model, tr, va, tc, out_dir=cfg.out, meta=meta)
    print(f"trained {res.steps} steps; best val CE {res.best_val:.4f} at step {res.best_step}; "
          f"checkpoint {cfg.out / 'best.ckpt'}")


def cmd_distill(cfg: RunConfig) -> None:
    stats, tr, va, meta = _train_inputs(cfg)
    teacher, _ = load_checkpoint(_require(cfg["distill.teacher"], "teacher checkpoint"))
    tc = train_config(cfg)
    teacher_ce = training.evaluate_ce(teacher, training.cap_pool(
        training.build_pools(va, teacher.config.L, teacher.config.K, 1), tc.max_val_windows))[0]
    res = training.distill(teacher, model_config(cfg), tr, va, tc, alpha=cfg["distill.alpha"],
                           out_dir=cfg.out, meta={**meta, "teacher_val_ce": teacher_ce})
    print(f"student best val CE {res.best_val:.4f} (teacher {teacher_ce:.4f}); "
          f"checkpoint {cfg.out / 'best.ckpt'}")


def cmd_eval(cfg: RunConfig) -> None:
    model, _ = load_checkpoint(_require(cfg["eval.ckpt"], "checkpoint"))
    stats = _load_stats(cfg)
    eps = _load_split(cfg, cfg["eval.split"])
    rep = evaluation.evaluate_rollout(model, eps, stats=stats, argmax=cfg["eval.argmax"],
                                      both=cfg["eval.both"])
    cols = ["mae", "mse", "n_elements", "n_skipped", "n_clamped", "argmax_mae", "argmax_mse"]
    evaluation.write_tsv(cfg.out / "report.tsv", [rep.to_dict()], cols)
    evaluation.write_jsonl(cfg.out / "per_episode.jsonl", rep.per_episode)
    evaluation.write_tsv(cfg.out / "per_channel.tsv", rep.per_channel,
                         list(rep.per_channel[0]) if rep.per_channel else ["channel"])
    print(f"{cfg['eval.split']}: MAE {rep.mae:.5f} MSE {rep.mse:.6f} over {rep.n_elements} values "
          f"({rep.n_skipped} episodes skipped)")


def cmd_route_dump(cfg: RunConfig) -> None:
    model, _ = load_checkpoint(_require(cfg["eval.ckpt"], "checkpoint"))
    stats = _load_stats(cfg)
    by_sys: dict[str, list] = {}
    for e in _normed(_load_split(cfg, cfg["eval.split"]), stats):
        by_sys.setdefault(e.system_id, []).append(e)
    dump = evaluation.dump_routing(model, by_sys)
    rows = dump.rows()
    cols = ["system_id", "block"] + [k for k in rows[0] if k.startswith("expert")] if rows else []
    evaluation.write_tsv(cfg.out / "routing.tsv", rows, cols)
    for i, a in enumerate(dump.systems):
        for b in dump.systems[i + 1:]:
            print(f"{a} vs {b}: max routing difference {dump.max_difference(a, b):.4f}")
    print(f"routing for {len(dump.systems)} system(s) written to {cfg.out / 'routing.tsv'}")


def cmd_scale(cfg: RunConfig) -> None:
    s = cfg.section("scale")
    rows = evaluation.scaling_harness(s["n_values"], model_config(cfg), train_config(cfg),
                                      seeds=s["seeds"], episodes_per_system=s["episodes_per_system"],
                                      T=s["scale_length"], out_dir=cfg.out, log=print)
    print(f"{len(rows)} runs written to {cfg.out / 'scaling.tsv'}")


def _make_env(cfg: RunConfig) -> sim.Env:
    p = cfg.section("planner")
    goal = p["goal"]
    if p["env"] == "linear":
        env = sim.make_env("linear")
        if goal is not None:
            if len(goal) != env.state_dim:
                raise RunConfigError(f"goal needs {env.state_dim} values, got {len(goal)}")
            env.goal = np.array(goal)
        return env
    if p["env"] == "double-integrator":
        return sim.DoubleIntegrator(DT, goal=goal[0] if goal else 0.0)
    if goal is not None:
        raise RunConfigError("the pendulum goal is fixed (upright)")
    return sim.Pendulum(DT)


def cmd_plan(cfg: RunConfig) -> None:
    p = cfg.section("planner")
    env = _make_env(cfg)
    mcfg = planner.MPPIConfig(p["horizon"], p["samples"], p["lam"], p["sigma"], cfg.seed)
    cost = planner.default_cost(env, p["cost"])
    oracle_spec = p["oracle"]
    if oracle_spec == "truth":
        make_oracle, warmup = (lambda: planner.TruthOracle(env)), 0
    elif oracle_spec.startswith("model:"):
        model, meta = load_checkpoint(_require(oracle_spec[len("model:"):], "oracle checkpoint"))
        layout, stats = layout_episode(meta), meta_stats(meta)
        if layout.states.shape[1] != env.state_dim or layout.actions.shape[1] != env.action_dim:
            raise RunConfigError(f"checkpoint channels {layout.states.shape[1]}+{layout.actions.shape[1]} "
                                 f"do not match env {env.name} ({env.state_dim}+{env.action_dim})")
        if p["horizon"] > model.config.k:
            raise RunConfigError(f"horizon {p['horizon']} exceeds the model's {model.config.k} queries")

        def make_oracle():
            return planner.ModelOracle.from_episode_layout(model, layout, stats, seed=cfg.seed)
        warmup = model.config.h
    else:
        raise RunConfigError(f"oracle must be 'truth' or 'model:<checkpoint>', got {oracle_spec!r}")
    rows = []
    for i in range(p["episodes"]):
        seed = cfg.seed + i
        res = planner.run_episode(env, make_oracle(), mcfg, cost, p["plan_steps"], seed=seed,
                                  warmup=warmup, trace_path=cfg.out / f"trace_{i}.jsonl")
        rows.append({"episode": i, "seed": seed, "steps": len(res.rewards),
                     "total_reward": res.total_reward, "final_distance": res.final_distance,
                     "diverged": res.diverged})
        print(f"episode {i} (seed {seed}): reward {res.total_reward:.3f}, "
              f"final distance {res.final_distance:.4f}")
    evaluation.write_tsv(cfg.out / "plan.tsv", rows,
                         ["episode", "seed", "steps", "total_reward", "final_distance", "diverged"])


def struct_table(scene: structure.Scene) -> list[dict]:
    """One row per (object, node) in file order; GLOBAL nodes omitted."""
    index = scene.index_map()
    rows = []
    for tree in scene.trees:
        for _, name, _ in tree.nodes:
            idx = index[(tree.name, name)]
            rows.append({"object": tree.name, "node": name, "obj": idx.obj, "pre": idx.pre,
                         "in": idx.in_, "post": idx.post})
    return rows


def cmd_struct_check(cfg: RunConfig) -> None:
    path = Path(cfg["struct.tree"]) if cfg["struct.tree"] else structure.walker_fixture_path()
    rows = struct_table(structure.load_tree_file(_require(path, "tree file")))
    cols = ["object", "node", "obj", "pre", "in", "post"]
    evaluation.write_tsv(cfg.out / "struct.tsv", rows, cols)
    width = max(len(r["node"]) for r in rows)
    print(f"{'node':<{width}}  pre  in  post")
    for r in rows:
        print(f"{r['node']:<{width}}  {r['pre']:>3}  {r['in']:>2}  {r['post']:>4}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic dataset with train/val/test splits and stats"),
    "train": (cmd_train, "train a model on a gen-data directory"),
    "distill": (cmd_distill, "distill a teacher checkpoint into a fresh student"),
    "eval": (cmd_eval, "k-step rollout MAE/MSE of a checkpoint in normalised space"),
    "route-dump": (cmd_route_dump, "mean routing weights per system and block"),
    "scale": (cmd_scale, "routed vs dense comparison over growing system counts"),
    "plan": (cmd_plan, "receding-horizon MPPI control on a toy environment"),
    "struct-check": (cmd_struct_check, "print traversal indices of a kinematic tree file"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sysmoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        add_arguments(sp, name)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"choose a command: {', '.join(COMMAND_SECTIONS)}")
        cfg = resolve(args.command, args)
        cfg.write_echo()
    except (UsageError, RunConfigError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        COMMANDS[args.command][0](cfg)
    except (RunConfigError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
