"""Run configuration: an INI file with one section per module, overridden by flags.

Resolution order is default < config file < command-line flag. The resolved
values are echoed to ``<out>/config.ini`` before a command does any work;
passing that file back with ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import configparser
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

OUT_ENV = "SYSMOE_OUT"
ECHO_NAME = "config.ini"


class RunConfigError(ValueError):
    """Malformed config file, unknown key or bad value."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Opt:
    section: str
    key: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    flag: str | None = None
    path: bool = False
    choices: tuple[str, ...] | None = None

    @property
    def flag_name(self) -> str:
        return self.flag or "--" + self.key.replace("_", "-")


_S, _I, _F, _B = str, int, float, _bool

OPTIONS: list[Opt] = [
    Opt("run", "seed", _I, 0, "master seed; every random stream derives from it"),
    Opt("run", "out", _S, None, f"output directory (default ${OUT_ENV}/<command> or runs/<command>)",
        path=True),
    Opt("gen", "kind", _S, "linear", "dataset family",
        choices=("linear", "pendulum", "double-integrator", "multi")),
    Opt("gen", "systems", _I, 5, "number of systems for --kind multi"),
    Opt("gen", "episodes", _I, 64, "episodes per system"),
    Opt("gen", "length", _I, 64, "steps per episode"),
    Opt("gen", "noise", _F, 0.0, "process-noise std (linear and multi)"),
    Opt("gen", "hold", _I, 1, "steps each random action is held (linear only)"),
    Opt("dataset", "dataset", _S, None, "directory written by gen-data", path=True),
    Opt("model", "preset", _S, "desk", "base model size", choices=("desk", "full", "tiny")),
    Opt("model", "d", _I, None, "embedding width"),
    Opt("model", "n_blocks", _I, None, "number of blocks", flag="--blocks"),
    Opt("model", "n_heads", _I, None, "attention heads", flag="--heads"),
    Opt("model", "P", _I, None, "number of experts", flag="--experts"),
    Opt("model", "K", _I, None, "value bins", flag="--bins"),
    Opt("model", "h", _I, None, "history steps", flag="--history"),
    Opt("model", "k", _I, None, "predicted steps (query tokens)", flag="--queries"),
    Opt("model", "ssm_state", _I, None, "SSM state size"),
    Opt("model", "expert_hidden", _I, None, "expert MLP hidden width"),
    Opt("model", "dropout", _F, None, "dropout rate"),
    Opt("model", "dense_ssm", _B, None, "single expert, no router (ablation)"),
    Opt("model", "no_struct_embed", _B, None, "drop the structural embedding (ablation)"),
    Opt("train", "total_steps", _I, 500, "optimizer steps", flag="--steps"),
    Opt("train", "lr", _F, 1e-3, "peak learning rate"),
    Opt("train", "warmup", _I, 50, "linear warmup steps"),
    Opt("train", "batch_size", _I, 16, "windows per step", flag="--batch"),
    Opt("train", "stride", _I, 4, "training window stride"),
    Opt("train", "eval_interval", _I, 100, "steps between validation passes"),
    Opt("train", "patience", _I, 10, "evaluations without improvement before stopping"),
    Opt("train", "max_val_windows", _I, 256, "cap on validation windows"),
    Opt("train", "freeze", _S, "", "comma-separated groups to freeze, 'all' or 'last:j'"),
    Opt("train", "init", _S, None, "checkpoint to fine-tune (its model config wins)", path=True),
    Opt("distill", "teacher", _S, None, "teacher checkpoint", path=True),
    Opt("distill", "alpha", _F, 0.9, "weight of the hard-label loss"),
    Opt("eval", "ckpt", _S, None, "checkpoint to evaluate", path=True),
    Opt("eval", "split", _S, "test", "dataset split", choices=("train", "val", "test")),
    Opt("eval", "argmax", _B, False, "decode by argmax instead of expectation"),
    Opt("eval", "both", _B, False, "report both decodes"),
    Opt("planner", "env", _S, "double-integrator", "environment",
        choices=("double-integrator", "pendulum", "linear")),
    Opt("planner", "cost", _S, "goal", "cost family", choices=("goal", "forward_progress")),
    Opt("planner", "oracle", _S, "truth", "'truth' or 'model:<checkpoint>'"),
    Opt("planner", "goal", _floats, None, "goal state for --env linear, comma-separated"),
    Opt("planner", "horizon", _I, 20, "planning horizon H"),
    Opt("planner", "samples", _I, 64, "sampled sequences N"),
    Opt("planner", "lam", _F, 0.25, "temperature", flag="--lambda"),
    Opt("planner", "sigma", _F, 0.5, "perturbation std"),
    Opt("planner", "episodes", _I, 5, "episodes (seeds seed .. seed+episodes-1)", flag="--plan-episodes"),
    Opt("planner", "plan_steps", _I, 200, "control steps per episode"),
    Opt("scale", "n_values", _ints, (1, 2, 5), "system counts, comma-separated"),
    Opt("scale", "seeds", _ints, (0, 1, 2), "seeds per system count, comma-separated"),
    Opt("scale", "episodes_per_system", _I, 32, "episodes per system"),
    Opt("scale", "scale_length", _I, 64, "steps per episode"),
    Opt("struct", "tree", _S, None, "tree file (default: bundled Walker tree)", path=True),
]

COMMAND_SECTIONS = {
    "gen-data": ("run", "gen"),
    "train": ("run", "dataset", "model", "train"),
    "distill": ("run", "dataset", "model", "train", "distill"),
    "eval": ("run", "dataset", "eval"),
    "route-dump": ("run", "dataset", "eval"),
    "scale": ("run", "model", "train", "scale"),
    "plan": ("run", "planner"),
    "struct-check": ("run", "struct"),
}


def options_for(command: str) -> list[Opt]:
    sections = COMMAND_SECTIONS[command]
    return [o for o in OPTIONS if o.section in sections]


def add_arguments(parser: argparse.ArgumentParser, command: str) -> None:
    parser.add_argument("--config", help="INI config file; flags override its values")
    for o in options_for(command):
        kw: dict[str, Any] = {"dest": f"{o.section}.{o.key}", "default": None,
                              "help": f"{o.help} [{o.section}] (default: {_fmt(o.default) or 'none'})"}
        if o.parse is _bool:
            kw["action"] = argparse.BooleanOptionalAction
        else:
            kw["type"] = o.parse
            kw["metavar"] = o.key.upper()
            if o.choices:
                kw["choices"] = o.choices
        parser.add_argument(o.flag_name, **kw)


def _line_of(path: Path, section: str, key: str) -> int | None:
    current = None
    for n, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
        elif current == section and "=" in line and line.split("=", 1)[0].strip() == key:
            return n
    return None


def read_file(path, command: str) -> dict[tuple[str, str], Any]:
    """Parsed values of the sections ``command`` uses; other sections are ignored."""
    path = Path(path)
    if not path.exists():
        raise RunConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive: [model] K and k differ
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise RunConfigError(f"cannot parse {exc}") from exc
    known = {(o.section, o.key): o for o in options_for(command)}
    out = {}
    for section in COMMAND_SECTIONS[command]:
        if not cp.has_section(section):
            continue
        for key, text in cp.items(section):
            where = f"{path}:{_line_of(path, section, key) or '?'}: [{section}] {key}"
            if (section, key) not in known:
                raise RunConfigError(f"{where}: unknown field")
            o = known[(section, key)]
            if text.strip() == "":
                out[(section, o.key)] = None
                continue
            try:
                value = o.parse(text)
            except ValueError as exc:
                raise RunConfigError(f"{where}: invalid value {text!r} ({exc})") from exc
            if o.choices and value not in o.choices:
                raise RunConfigError(f"{where}: {value!r} not in {list(o.choices)}")
            out[(section, o.key)] = value
    return out


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV) or "runs") / command


class RunConfig:
    """Resolved values for one command, addressable as ``cfg["section.key"]``."""

    def __init__(self, command: str, values: dict[tuple[str, str], Any]):
        self.command = command
        self.values = values

    def __getitem__(self, name: str):
        section, key = name.split(".", 1)
        return self.values[(section, key)]

    @property
    def seed(self) -> int:
        return self["run.seed"]

    @property
    def out(self) -> Path:
        return Path(self["run.out"])

    def section(self, name: str) -> dict[str, Any]:
        return {k: v for (s, k), v in self.values.items() if s == name}

    def to_ini(self) -> str:
        lines = []
        for section in COMMAND_SECTIONS[self.command]:
            lines.append(f"[{section}]")
            for o in options_for(self.command):
                if o.section == section:
                    lines.append(f"{o.key} = {_fmt(self.values[(section, o.key)])}".rstrip())
            lines.append("")
        return "\n".join(lines)

    def write_echo(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / ECHO_NAME
        path.write_text(self.to_ini())
        return path


def resolve(command: str, args: argparse.Namespace) -> RunConfig:
    file_values = read_file(args.config, command) if getattr(args, "config", None) else {}
    values = {}
    for o in options_for(command):
        flag = getattr(args, f"{o.section}.{o.key}", None)
        if flag is not None:
            v = flag
        elif (o.section, o.key) in file_values:
            v = file_values[(o.section, o.key)]
        else:
            v = o.default
        if o.path and v is not None:
            v = str(Path(v).expanduser().resolve())
        values[(o.section, o.key)] = v
    if values[("run", "out")] is None:
        values[("run", "out")] = str(default_out(command).resolve())
    if values[("run", "seed")] is None:
        raise RunConfigError("[run] seed must be set")
    return RunConfig(command, values)
