# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled selective-scan kernels; same contract as ``_scan_py``."""

import numpy as np
from libc.math cimport exp


def scan_forward(double[:, :, ::1] u, double[:, :, ::1] delta,
                 double[:, ::1] A, double[:, :, ::1] B):
    cdef Py_ssize_t Bt = u.shape[0], T = u.shape[1], D = u.shape[2], N = A.shape[1]
    hs_arr = np.empty((Bt, T, D, N))
    cdef double[:, :, :, ::1] hs = hs_arr
    cdef Py_ssize_t b, t, d, n
    cdef double dt, du, prev
    with nogil:
        for b in range(Bt):
            for t in range(T):
                for d in range(D):
                    dt = delta[b, t, d]
                    du = dt * u[b, t, d]
                    for n in range(N):
                        prev = hs[b, t - 1, d, n] if t > 0 else 0.0
                        hs[b, t, d, n] = exp(dt * A[d, n]) * prev + du * B[b, t, n]
    return hs_arr


def scan_backward(double[:, :, ::1] u, double[:, :, ::1] delta,
                  double[:, ::1] A, double[:, :, ::1] B,
                  double[:, :, :, ::1] hs, double[:, :, :, ::1] dhs):
    cdef Py_ssize_t Bt = u.shape[0], T = u.shape[1], D = u.shape[2], N = A.shape[1]
    du_arr = np.zeros((Bt, T, D))
    ddelta_arr = np.zeros((Bt, T, D))
    dA_arr = np.zeros((D, N))
    dB_arr = np.zeros((Bt, T, N))
    g_arr = np.zeros((D, N))
    cdef double[:, :, ::1] du = du_arr
    cdef double[:, :, ::1] ddelta = ddelta_arr
    cdef double[:, ::1] dAm = dA_arr
    cdef double[:, :, ::1] dB = dB_arr
    cdef double[:, ::1] g = g_arr
    cdef Py_ssize_t b, t, d, n
    cdef double dt, ut, a, bn, gn, hp, dA, acc_delta, acc_u
    with nogil:
        for b in range(Bt):
            for d in range(D):
                for n in range(N):
                    g[d, n] = 0.0
            for t in range(T - 1, -1, -1):
                for d in range(D):
                    dt = delta[b, t, d]
                    ut = u[b, t, d]
                    acc_delta = 0.0
                    acc_u = 0.0
                    for n in range(N):
                        a = A[d, n]
                        bn = B[b, t, n]
                        gn = g[d, n] + dhs[b, t, d, n]
                        hp = hs[b, t - 1, d, n] if t > 0 else 0.0
                        dA = exp(dt * a)
                        acc_delta += gn * (hp * dA * a + bn * ut)
                        dAm[d, n] += gn * hp * dA * dt
                        dB[b, t, n] += gn * dt * ut
                        acc_u += gn * bn
                        g[d, n] = gn * dA
                    ddelta[b, t, d] = acc_delta
                    du[b, t, d] = acc_u * dt
    return du_arr, ddelta_arr, dA_arr, dB_arr
