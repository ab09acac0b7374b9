"""Differentiable selective scan with a compiled kernel when available.

The compiled kernel (``_scan_ext``) is used unless it failed to build or
``SYSMOE_PURE_PYTHON=1`` is set; both backends share one contract.
"""

from __future__ import annotations

import os

import numpy as np

from . import _scan_py
from .tensor import DimensionError, Tensor, as_tensor, make_node

_py_backend = _scan_py

if os.environ.get("SYSMOE_PURE_PYTHON", "") not in ("", "0"):
    _ext_backend = None
else:
    try:
        from . import _scan_ext as _ext_backend
    except ImportError:  # extension not built
        _ext_backend = None

BACKEND = "cython" if _ext_backend is not None else "numpy"


def get_kernels(backend: str | None = None):
    """Return the (forward, backward) kernel module for ``backend``."""
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _ext_backend is None:
            raise RuntimeError("compiled scan kernel is not available")
        return _ext_backend
    if backend == "numpy":
        return _py_backend
    raise ValueError(f"unknown scan backend {backend!r}")


def selective_scan_states(u, delta, A, B, backend: str | None = None) -> Tensor:
    """Hidden states of the diagonal selective recurrence.

    u, delta: (Bt, T, D); A: (D, N); B: (Bt, T, N). Returns (Bt, T, D, N)
    holding h[t] = exp(delta[t] A) h[t-1] + delta[t] B[t] u[t], h[-1] = 0.
    """
    u, delta, A, B = (as_tensor(x) for x in (u, delta, A, B))
    if u.ndim != 3 or delta.shape != u.shape or A.ndim != 2 or A.shape[0] != u.shape[2] \
            or B.shape != (u.shape[0], u.shape[1], A.shape[1]):
        raise DimensionError(
            f"selective_scan shapes u={u.shape} delta={delta.shape} A={A.shape} B={B.shape}")
    k = get_kernels(backend)
    ud, dd, Ad, Bd = (np.ascontiguousarray(x.data) for x in (u, delta, A, B))
    hs = k.scan_forward(ud, dd, Ad, Bd)

    def backward(g):
        return k.scan_backward(ud, dd, Ad, Bd, hs, np.ascontiguousarray(g))

    return make_node(hs, (u, delta, A, B), backward)


def state_readout(hs, C) -> Tensor:
    """``y[b, t, d] = sum_n C[b, t, n] hs[b, t, d, n]`` without the 4-d product."""
    hs, C = as_tensor(hs), as_tensor(C)
    if hs.ndim != 4 or C.shape != (hs.shape[0], hs.shape[1], hs.shape[3]):
        raise DimensionError(f"state_readout shapes hs={hs.shape} C={C.shape}")
    out = np.matmul(hs.data, C.data[..., None])[..., 0]

    def backward(g):
        dhs = g[..., None] * C.data[:, :, None, :] if hs.requires_grad else None
        dC = np.matmul(np.swapaxes(hs.data, -1, -2), g[..., None])[..., 0] if C.requires_grad else None
        return dhs, dC

    return make_node(out, (hs, C), backward)


def system_readout(hs, u, delta, A, B, C) -> Tensor:
    """Readout of one extra recurrence step from every state in ``hs``.

    With ``h'[b,t] = exp(delta[b,t] A) * hs[b,t] + delta[b,t] u[b,t] B[b,t]``
    (broadcast over the state axis) returns ``sum_n C[b,t,n] h'[b,t,:,n]``.
    Shapes: hs (Bt, T, D, N); u, delta (Bt, T, D); A (D, N); B, C (Bt, T, N).
    """
    hs, u, delta, A, B, C = (as_tensor(x) for x in (hs, u, delta, A, B, C))
    if hs.ndim != 4 or u.shape != hs.shape[:3] or delta.shape != u.shape \
            or A.shape != hs.shape[2:] or B.shape != C.shape or B.shape != hs.shape[:2] + hs.shape[3:]:
        raise DimensionError(f"system_readout shapes hs={hs.shape} u={u.shape} A={A.shape} B={B.shape}")
    decay = np.exp(delta.data[..., None] * A.data)
    du_ = delta.data * u.data
    h_next = decay * hs.data + du_[..., None] * B.data[:, :, None, :]
    out = np.matmul(h_next, C.data[..., None])[..., 0]

    def backward(g):
        dh = g[..., None] * C.data[:, :, None, :]
        dC = np.matmul(np.swapaxes(h_next, -1, -2), g[..., None])[..., 0]
        dh_decay_hs = dh * decay * hs.data
        dhs = dh * decay
        # B contributes delta*u*B; decay contributes exp(delta A)
        dB_part = np.matmul(dh, B.data[..., None])[..., 0]  # sum_n dh * B
        ddelta = (dh_decay_hs * A.data).sum(-1) + dB_part * u.data
        dA = (dh_decay_hs * delta.data[..., None]).sum(axis=(0, 1))
        du = dB_part * delta.data
        dB = np.matmul(np.swapaxes(dh, -1, -2), du_[..., None])[..., 0]
        return dhs, du, ddelta, dA, dB, dC

    return make_node(out, (hs, u, delta, A, B, C), backward)
