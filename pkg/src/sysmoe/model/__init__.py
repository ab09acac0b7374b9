"""World model: configuration, layers, forward pass, losses and checkpoints."""

from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, ModelConfig, preset
from .core import ForwardResult, SysMoEModel
from .layers import moe_mix, multi_head_attention, route, ssm_mixer
from .losses import ce_loss, kd_loss, next_step_targets

__all__ = [
    "CheckpointError", "ConfigError", "ForwardResult", "ModelConfig", "PRESETS", "SysMoEModel",
    "ce_loss", "kd_loss", "load_checkpoint", "moe_mix", "multi_head_attention",
    "next_step_targets", "preset", "read_checkpoint", "route", "save_checkpoint", "ssm_mixer",
]
