"""Functional building blocks: channel attention, selective SSM, routing, experts.

Parameters are plain dicts of :class:`Tensor` so blocks can be assembled,
inspected and checkpointed by name.
"""

from __future__ import annotations

import numpy as np

from ..numerics import (Tensor, as_tensor, causal_conv1d, concat, exp, gelu, layernorm,
                        selective_scan_states, silu, softmax, softplus)
from ..numerics.scan import state_readout, system_readout

Params = dict[str, Tensor]


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def init_linear(rng, fan_in: int, fan_out: int) -> Tensor:
    return _param(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))


# -- attention ----------------------------------------------------------------

def init_attention(rng, d: int) -> Params:
    return {name: init_linear(rng, d, d) for name in ("wq", "wk", "wv", "wo")}


def multi_head_attention(xq, xkv, p: Params, n_heads: int, return_weights: bool = False):
    """Scaled dot-product attention of ``xq`` (N, Tq, d) over ``xkv`` (N, Tk, d).

    Projections carry no bias, so a zero value projection yields zero output.
    """
    xq, xkv = as_tensor(xq), as_tensor(xkv)
    N, Tq, d = xq.shape
    Tk = xkv.shape[1]
    dh = d // n_heads

    def heads(x, w, T):
        return (x @ w).reshape(N, T, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(xq, p["wq"], Tq), heads(xkv, p["wk"], Tk), heads(xkv, p["wv"], Tk)
    att = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(N, Tq, d) @ p["wo"]
    return (out, att.data) if return_weights else out


# -- selective state-space mixer ----------------------------------------------

def init_ssm(rng, d: int, d_inner: int, n_state: int, rank: int, conv_width: int) -> Params:
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), d_inner))
    return {
        "in_w": init_linear(rng, d, 2 * d_inner),
        "conv_w": _param(rng.normal(0.0, 1.0 / np.sqrt(conv_width), (d_inner, conv_width))),
        "conv_b": _param(np.zeros(d_inner)),
        "x_w": init_linear(rng, d_inner, rank + 2 * n_state),
        "dt_w": _param(rng.normal(0.0, rank ** -0.5, (rank, d_inner))),
        "dt_b": _param(dt + np.log(-np.expm1(-dt))),  # softplus^-1(dt)
        "a_log": _param(np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_inner, 1)))),
        "D": _param(np.ones(d_inner)),
        "out_w": init_linear(rng, d_inner, d),
    }


def _ssm_inputs(u, p: Params, n_state: int):
    """Input-dependent step, B and C from the conv output ``u``."""
    proj = u @ p["x_w"]
    rank = p["dt_w"].shape[0]
    delta = softplus(proj[..., :rank] @ p["dt_w"] + p["dt_b"])
    B = proj[..., rank:rank + n_state]
    C = proj[..., rank + n_state:]
    return delta, B, C


def ssm_mixer(x, p: Params, system=None, backend: str | None = None):
    """Gated selective SSM over time for each row of ``x`` (Bt, T, d).

    Returns ``(out, out_sys)``. ``out[:, t]`` depends on ``x[:, :t+1]`` only.
    When ``system`` (a d-vector) is given, ``out_sys[:, t]`` is the mixer
    output at a virtual extra position holding ``system`` placed right after
    step t, computed from the recurrent state at t; it is therefore causal
    too, and at the last step equals appending ``system`` to the sequence.
    """
    x = as_tensor(x)
    Di = p["D"].shape[0]
    N = p["a_log"].shape[1]
    W = p["conv_w"].shape[1]
    xz = x @ p["in_w"]
    xin, z = xz[..., :Di], xz[..., Di:]
    u = silu(causal_conv1d(xin, p["conv_w"], p["conv_b"]))
    delta, B, C = _ssm_inputs(u, p, N)
    A = -exp(p["a_log"])
    hs = selective_scan_states(u, delta, A, B, backend=backend)  # (Bt, T, Di, N)
    y = state_readout(hs, C) + u * p["D"]
    out = (y * silu(z)) @ p["out_w"]
    if system is None:
        return out, None

    e = as_tensor(system)
    ez = (e.reshape(1, -1) @ p["in_w"]).reshape(2 * Di)
    e_in, e_z = ez[:Di], ez[Di:]
    # previous W-1 real inputs shift one tap left; the system token takes the current tap
    shifted = concat([Tensor(np.zeros((Di, 1))), p["conv_w"][:, :W - 1]], axis=1)
    u_e = silu(causal_conv1d(xin, shifted, p["conv_b"]) + e_in * p["conv_w"][:, W - 1])
    delta_e, B_e, C_e = _ssm_inputs(u_e, p, N)
    y_e = system_readout(hs, u_e, delta_e, A, B_e, C_e) + u_e * p["D"]
    out_e = (y_e * silu(e_z)) @ p["out_w"]
    return out, out_e


def ssm_reference(x, p: Params, backend: str | None = None):
    """Mixer output over a full sequence (used to check the virtual-token path)."""
    return ssm_mixer(x, p, None, backend)[0]


# -- routing and experts ------------------------------------------------------

def init_router(d: int, P: int) -> Params:
    return {"w": _param(np.zeros((d, P))), "b": _param(np.zeros(P))}


def route(u_sys, p: Params) -> Tensor:
    """Softmax gate ``softmax(u_sys W + b)`` over experts (last axis)."""
    return softmax(as_tensor(u_sys) @ p["w"] + p["b"], axis=-1)


def init_experts(rng, d: int, hidden: int, P: int) -> Params:
    return {
        "w1": _param(rng.normal(0.0, 1.0 / np.sqrt(d), (P, d, hidden))),
        "b1": _param(np.zeros((P, 1, hidden))),
        "w2": _param(rng.normal(0.0, 1.0 / np.sqrt(hidden), (P, hidden, d))),
        "b2": _param(np.zeros((P, 1, d))),
    }


def expert_outputs(U, p: Params) -> Tensor:
    """All expert MLPs on rows of ``U`` (n, d): returns (P, n, d)."""
    U = as_tensor(U)
    hidden = gelu(U.reshape(1, *U.shape) @ p["w1"] + p["b1"])
    return hidden @ p["w2"] + p["b2"]


def moe_mix(U, w, p: Params) -> Tensor:
    """Dense soft mixture ``sum_p w_p E_p(U)``.

    ``U`` is (n, d); ``w`` is (P,) shared by all rows or (n, P) per row.
    """
    U, w = as_tensor(U), as_tensor(w)
    outs = expert_outputs(U, p)
    P = outs.shape[0]
    if w.ndim == 1:
        wt = w.reshape(P, 1, 1)
    else:
        wt = w.transpose(1, 0).reshape(P, U.shape[0], 1)
    return (outs * wt).sum(axis=0)


def init_layernorm(d: int) -> Params:
    return {"g": _param(np.ones(d)), "b": _param(np.zeros(d))}


def apply_layernorm(x, p: Params) -> Tensor:
    return layernorm(x, p["g"], p["b"])
