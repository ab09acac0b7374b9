"""Next-step cross-entropy and distillation losses, mean-reduced over valid pairs."""

from __future__ import annotations

import numpy as np

from ..numerics import ContractError, Tensor, gather_last, soft_cross_entropy, tsum
from ..tokenizer import TokenBatch


def _mean_over(values: Tensor, valid: np.ndarray) -> Tensor:
    weight = np.broadcast_to(np.asarray(valid, dtype=np.float64), values.shape)
    n = weight.sum()
    if n == 0:
        raise ContractError("no valid (position, channel) pairs in the loss")
    return tsum(values * weight) * (1.0 / n)


def ce_loss(logp, targets, valid=None) -> Tensor:
    """Mean of ``-log p[target]`` over valid entries.

    ``logp`` is (..., K) log-probabilities aligned with ``targets`` (...);
    ``valid`` broadcasts against ``targets`` (all valid when None).
    """
    targets = np.asarray(targets, dtype=np.int64)
    K = logp.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        raise ContractError(f"target bin outside [0, {K})")
    valid = np.ones(targets.shape, dtype=bool) if valid is None else valid
    return _mean_over(-gather_last(logp, targets), valid)


def kd_loss(student_logp, teacher_probs, targets, valid=None, alpha: float = 0.9) -> Tensor:
    """``alpha * CE(student, targets) + (1 - alpha) * H(teacher, student)``.

    ``teacher_probs`` is a plain array, so no gradient reaches the teacher.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must lie in [0, 1]")
    teacher_probs = np.asarray(teacher_probs.data if isinstance(teacher_probs, Tensor) else teacher_probs)
    hard = ce_loss(student_logp, targets, valid)
    if alpha == 1.0:
        return hard
    valid = np.ones(np.shape(targets), dtype=bool) if valid is None else valid
    soft = _mean_over(soft_cross_entropy(teacher_probs, student_logp), valid)
    return hard * alpha + soft * (1.0 - alpha)


def next_step_targets(logp: Tensor, batch: TokenBatch):
    """Align outputs at steps 0..L-2 with state bins at 1..L-1.

    A pair counts when both its input step and target step are real.
    """
    valid = (batch.mask[:, :-1] & batch.mask[:, 1:])[:, :, None]
    return logp[:, :-1], batch.bins[:, 1:], valid
