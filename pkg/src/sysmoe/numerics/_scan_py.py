"""Pure numpy selective-scan kernels (reference and fallback).

Recurrence, per batch row b, feature d, state n::

    h[t] = exp(delta[t, d] * A[d, n]) * h[t-1] + delta[t, d] * B[t, n] * u[t, d]

with h[-1] = 0. Vectorised over (batch, feature, state); the time loop stays
in Python.
"""

import numpy as np


def scan_forward(u, delta, A, B):
    Bt, T, D = u.shape
    N = A.shape[1]
    hs = np.empty((Bt, T, D, N))
    h = np.zeros((Bt, D, N))
    for t in range(T):
        dA = np.exp(delta[:, t, :, None] * A)
        h = dA * h + (delta[:, t] * u[:, t])[:, :, None] * B[:, t, None, :]
        hs[:, t] = h
    return hs


def scan_backward(u, delta, A, B, hs, dhs):
    Bt, T, D = u.shape
    N = A.shape[1]
    du = np.zeros((Bt, T, D))
    ddelta = np.zeros((Bt, T, D))
    dAm = np.zeros((D, N))
    dB = np.zeros((Bt, T, N))
    g = np.zeros((Bt, D, N))
    for t in range(T - 1, -1, -1):
        g = g + dhs[:, t]
        dA = np.exp(delta[:, t, :, None] * A)
        h_prev = hs[:, t - 1] if t > 0 else np.zeros((Bt, D, N))
        ut = u[:, t]
        dt = delta[:, t]
        Bn = B[:, t, None, :]
        gh = g * h_prev * dA
        ddelta[:, t] = (gh * A).sum(-1) + (g * Bn).sum(-1) * ut
        dAm += (gh * dt[:, :, None]).sum(0)
        dB[:, t] = (g * (dt * ut)[:, :, None]).sum(1)
        du[:, t] = (g * Bn).sum(-1) * dt
        g = g * dA
    return du, ddelta, dAm, dB
