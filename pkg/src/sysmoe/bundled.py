"""Bundled fixtures: the Walker tree file and a tiny pretrained checkpoint.

The checkpoint is produced by :func:`build_tiny_checkpoint`, which is fully
deterministic; ``python3 -m sysmoe.bundled`` regenerates the shipped file.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from . import data
from .model import SysMoEModel, save_checkpoint
from .model.config import preset
from .structure import walker_fixture_path
from .training import TrainConfig, train

FIXTURES = Path(__file__).parent / "fixtures"
TINY_SEED = 0

__all__ = ["FIXTURES", "build_tiny_checkpoint", "tiny_checkpoint_path", "walker_fixture_path"]


def tiny_checkpoint_path() -> Path:
    return FIXTURES / "tiny.ckpt"


def build_tiny_checkpoint(path, steps: int = 60) -> SysMoEModel:
    """Train the ``tiny`` preset briefly on the 2-D linear system and save it.

    The checkpoint metadata carries normalisation stats and channel layout,
    so ``plan --oracle model:<path>`` works on ``--env linear``.
    """
    from .cli import dataset_meta
    eps = data.gen_linear_system(0.9 * np.eye(2), 0.1 * np.eye(2), 0.0, 24, 32, TINY_SEED, hold=4)
    split = data.split_dataset(eps, seed=TINY_SEED)
    norm = [data.normalize(e, split.stats) for e in split.train]
    val = [data.normalize(e, split.stats) for e in split.val]
    model = SysMoEModel(preset("tiny"), seed=TINY_SEED)
    train(model, norm, val, TrainConfig(lr=3e-3, warmup=10, total_steps=steps, eval_interval=20,
                                        stride=2, seed=TINY_SEED))
    save_checkpoint(path, model, dataset_meta(split.stats, split.train[0]))
    return model


if __name__ == "__main__":
    build_tiny_checkpoint(sys.argv[1] if len(sys.argv) > 1 else tiny_checkpoint_path())
