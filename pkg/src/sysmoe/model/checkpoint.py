"""Versioned binary checkpoints that round-trip bit-exactly.

Layout: a magic line ``SYSMOE-CKPT <version>``, one JSON header line
(model config, parameter names and shapes in declared order, free-form
metadata), then every parameter as raw little-endian float64 in that order.
The encoding is deterministic, so equal models give equal bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .core import SysMoEModel

MAGIC = "SYSMOE-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint."""


def save_checkpoint(path, model: SysMoEModel, meta: dict | None = None) -> None:
    header = {
        "config": model.config.to_dict(),
        "params": [[name, list(t.shape)] for name, t in model.params.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(f"{MAGIC} {VERSION}\n".encode())
        f.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for t in model.params.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.readline().decode(errors="replace").split()
        if len(magic) != 2 or magic[0] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        if magic[1] != str(VERSION):
            raise CheckpointError(f"{path}: checkpoint version {magic[1]}, expected {VERSION}")
        header = json.loads(f.readline())
        blob = f.read()
    state, offset = {}, 0
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        if offset + 8 * n > len(blob):
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return ModelConfig.from_dict(header["config"]), state, header["meta"]


def load_checkpoint(path, backend: str | None = None) -> tuple[SysMoEModel, dict]:
    config, state, meta = read_checkpoint(path)
    model = SysMoEModel(config, seed=0, backend=backend)
    model.load_state(state)
    return model, meta
