"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], n_coords: int = 64,
                      eps: float = 1e-4, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild its scalar output from the current ``params`` values on
    every call. Up to ``n_coords`` coordinates are sampled across all params
    (all of them when fewer exist). Error per coordinate is
    ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        fp = f().item()
        flat[j] = orig - eps
        fm = f().item()
        flat[j] = orig
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic[i].reshape(-1)[j] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst
