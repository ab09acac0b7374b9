"""Fused differentiable ops with hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, as_tensor, make_node

LN_EPS = 1e-5


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), backward)


def layernorm(x, gain=None, bias=None, axis: int = -1, eps: float = LN_EPS) -> Tensor:
    """Normalise along ``axis`` to zero mean / unit variance, then scale and shift.

    ``gain`` and ``bias`` broadcast against the output; either may be None.
    """
    x = as_tensor(x)
    if x.shape[axis] < 2:
        raise ContractError(f"layernorm axis extent must be >= 2, got {x.shape[axis]}")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    if gain is not None:
        gain = as_tensor(gain)
        out = out * gain.data
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        dxhat = g * gain.data if gain is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append(_reduce_to(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_reduce_to(g, bias.shape))
        return grads

    return make_node(out, parents, backward)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    from .tensor import unbroadcast
    return unbroadcast(g, tuple(shape))


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,))


def causal_conv1d(x, weight, bias=None) -> Tensor:
    """Depthwise causal convolution over time.

    x: (B, T, D); weight: (D, W) with tap ``W-1`` on the current step;
    bias: (D,). Output (B, T, D); step t sees inputs t-W+1 .. t only.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 2 or weight.shape[0] != x.shape[2]:
        raise DimensionError(f"causal_conv1d shapes {x.shape} and {weight.shape}")
    B, T, D = x.shape
    W = weight.shape[1]
    xp = np.concatenate([np.zeros((B, W - 1, D)), x.data], axis=1)
    out = np.zeros((B, T, D))
    for j in range(W):
        out += xp[:, j:j + T, :] * weight.data[:, j]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(weight.data)
        for j in range(W):
            dxp[:, j:j + T, :] += g * weight.data[:, j]
            dw[:, j] = (g * xp[:, j:j + T, :]).sum(axis=(0, 1))
        grads = [dxp[:, W - 1:, :], dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return make_node(out, parents, backward)


def gather_last(logp, idx) -> Tensor:
    """``logp[..., idx]`` elementwise along the last axis."""
    logp = as_tensor(logp)
    idx = np.asarray(idx, dtype=np.int64)
    picked = np.take_along_axis(logp.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros(logp.shape)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return make_node(picked, (logp,), backward)


def soft_cross_entropy(target_probs: np.ndarray, logp) -> Tensor:
    """Per-slice ``-sum_k p_k log q_k`` with ``0 * log 0`` taken as 0.

    ``target_probs`` is a constant (no gradient); result drops the last axis.
    """
    logp = as_tensor(logp)
    p = np.asarray(target_probs, dtype=np.float64)
    safe = np.where(p > 0, logp.data, 0.0)
    out = -(p * safe).sum(axis=-1)
    return make_node(out, (logp,), lambda g: (-g[..., None] * p,))
