"""Model hyperparameters and named presets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace


class ConfigError(ValueError):
    """Inconsistent or unknown configuration values."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    P: int = 4
    K: int = 64
    h: int = 16
    k: int = 16
    ssm_state: int = 16
    expand: int = 2
    conv_width: int = 4
    dt_rank: int = 0  # 0 -> ceil(d / 16)
    expert_hidden: int = 128
    dropout: float = 0.1
    dense_ssm: bool = False
    no_struct_embed: bool = False
    max_channels: int = 128
    max_objects: int = 4
    max_nodes: int = 32

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.d % 4:
            raise ConfigError(f"d={self.d} not divisible by 4")
        for name in ("n_blocks", "P", "K", "h", "k", "ssm_state", "expand", "conv_width",
                     "expert_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def L(self) -> int:
        return self.h + self.k

    @property
    def d_inner(self) -> int:
        return self.expand * self.d

    @property
    def rank(self) -> int:
        return self.dt_rank or math.ceil(self.d / 16)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


PRESETS = {
    "desk": ModelConfig(),
    # published scale: 6 blocks of width 256 with 4 heads, 256 bins, 50/100 window
    "full": ModelConfig(d=256, n_blocks=6, n_heads=4, P=4, K=256, h=50, k=100, ssm_state=64,
                         expert_hidden=512, max_channels=128),
    "tiny": ModelConfig(d=16, n_blocks=1, n_heads=2, P=2, K=16, h=4, k=4, ssm_state=4,
                        expert_hidden=32, dropout=0.0),
}


def preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]
