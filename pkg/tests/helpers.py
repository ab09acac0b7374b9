"""Small shared builders for model-level tests."""

import numpy as np

from sysmoe import data
from sysmoe.model import ModelConfig, SysMoEModel
from sysmoe.training import build_pools

GRAD_CONFIG = ModelConfig(d=8, n_blocks=1, n_heads=2, P=2, K=16, h=4, k=2, ssm_state=4,
                          expert_hidden=8, dropout=0.0, max_channels=8, max_objects=2, max_nodes=8)


def linear_episodes(n=4, T=24, seed=0, dim=2, hold=1):
    A, B = 0.9 * np.eye(dim), 0.1 * np.eye(dim)
    eps = data.gen_linear_system(A, B, 0.0, n, T, seed, hold=hold)
    stats = data.compute_norm_stats(eps)
    return [data.normalize(e, stats) for e in eps], stats


def batch_for(config: ModelConfig, n=4, seed=0, dim=2):
    eps, _ = linear_episodes(n, config.L + 4, seed, dim)
    return build_pools(eps, config.L, config.K, stride=config.L)[0]


def model(config: ModelConfig = GRAD_CONFIG, seed=0, **kw) -> SysMoEModel:
    return SysMoEModel(config.with_(**kw) if kw else config, seed=seed)
