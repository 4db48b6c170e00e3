# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused propagation kernel (forward and backward) over a batch of small hypergraphs.

Same contract as ``hgac._kernels_py`` (per-sample weights ``w`` of shape (B, M)); loops are fused per batch element so no
temporaries of shape (B, N, M) are materialised.
"""
import numpy as np
from libc.math cimport sqrt


def propagation_forward(const double[:, :, ::1] H, const double[:, ::1] w, double eps):
    cdef Py_ssize_t B = H.shape[0], N = H.shape[1], M = H.shape[2]
    cdef Py_ssize_t b, i, k, m
    cdef double acc, dvc, dec
    G_arr = np.empty((B, N, N))
    dv_arr = np.empty((B, N))
    de_arr = np.empty((B, M))
    cdef double[:, :, ::1] G = G_arr
    cdef double[:, ::1] dv = dv_arr
    cdef double[:, ::1] de = de_arr
    cdef double[::1] s = np.empty(N)
    cdef double[::1] c = np.empty(M)
    with nogil:
        for b in range(B):
            for i in range(N):
                acc = 0.0
                for m in range(M):
                    acc = acc + H[b, i, m] * w[b, m]
                dv[b, i] = acc
                dvc = acc if acc > eps else eps
                s[i] = 1.0 / sqrt(dvc)
            for m in range(M):
                acc = 0.0
                for i in range(N):
                    acc = acc + H[b, i, m]
                de[b, m] = acc
                dec = acc if acc > eps else eps
                c[m] = w[b, m] / dec
            for i in range(N):
                for k in range(i, N):
                    acc = 0.0
                    for m in range(M):
                        acc = acc + H[b, i, m] * c[m] * H[b, k, m]
                    acc = acc * s[i] * s[k]
                    G[b, i, k] = acc
                    G[b, k, i] = acc
    return G_arr, dv_arr, de_arr


def propagation_backward(const double[:, :, ::1] H, const double[:, ::1] w,
                         const double[:, ::1] dv, const double[:, ::1] de,
                         const double[:, :, ::1] gG, double eps):
    cdef Py_ssize_t B = H.shape[0], N = H.shape[1], M = H.shape[2]
    cdef Py_ssize_t b, i, k, m
    cdef double acc, t, gc, gs, dvc, dec
    gH_arr = np.zeros((B, N, M))
    gw_arr = np.zeros((B, M))
    cdef double[:, :, ::1] gH = gH_arr
    cdef double[:, ::1] gw = gw_arr
    cdef double[::1] s = np.empty(N)
    cdef double[::1] c = np.empty(M)
    cdef double[::1] gdv = np.empty(N)
    cdef double[::1] gde = np.empty(M)
    # T[i, k] = (gG[i, k] + gG[k, i]) * s[i] * s[k]
    cdef double[:, ::1] T = np.empty((N, N))
    with nogil:
        for b in range(B):
            for i in range(N):
                dvc = dv[b, i] if dv[b, i] > eps else eps
                s[i] = 1.0 / sqrt(dvc)
            for m in range(M):
                dec = de[b, m] if de[b, m] > eps else eps
                c[m] = w[b, m] / dec
            for i in range(N):
                for k in range(N):
                    T[i, k] = (gG[b, i, k] + gG[b, k, i]) * s[i] * s[k]
            # contributions through H directly and through c
            for m in range(M):
                gc = 0.0
                for i in range(N):
                    acc = 0.0
                    for k in range(N):
                        acc = acc + T[i, k] * H[b, k, m]
                    gH[b, i, m] = acc * c[m]
                    gc = gc + 0.5 * acc * H[b, i, m]
                dec = de[b, m] if de[b, m] > eps else eps
                gw[b, m] = gw[b, m] + gc / dec
                gde[m] = -gc * w[b, m] / (dec * dec) if de[b, m] > eps else 0.0
            # contribution through s
            for i in range(N):
                gs = 0.0
                for k in range(N):
                    t = 0.0
                    for m in range(M):
                        t = t + H[b, i, m] * c[m] * H[b, k, m]
                    gs = gs + (gG[b, i, k] + gG[b, k, i]) * t * s[k]
                dvc = dv[b, i] if dv[b, i] > eps else eps
                gdv[i] = -0.5 * gs / (dvc * sqrt(dvc)) if dv[b, i] > eps else 0.0
            for i in range(N):
                for m in range(M):
                    gH[b, i, m] = gH[b, i, m] + gdv[i] * w[b, m] + gde[m]
                    gw[b, m] = gw[b, m] + gdv[i] * H[b, i, m]
    return gH_arr, gw_arr
