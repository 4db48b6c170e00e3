"""Slow, explicit reference computations used by the tests.

Written from the definitions with plain loops and dense matrices; they share
no code with the package beyond numpy.
"""
import numpy as np


def degrees_loop(H, w):
    N, M = H.shape
    dv = np.zeros(N)
    de = np.zeros(M)
    for i in range(N):
        for j in range(M):
            dv[i] += w[j] * H[i, j]
            de[j] += H[i, j]
    return dv, de


def conv_chain(X, H, w, P, eps=1e-8):
    """``Dv^-1/2 H W De^-1 H^T Dv^-1/2 X P`` as five explicit matrix products."""
    dv, de = degrees_loop(H, w)
    Dv_is = np.diag(1.0 / np.sqrt(np.maximum(dv, eps)))
    W = np.diag(w)
    De_inv = np.diag(1.0 / np.maximum(de, eps))
    return Dv_is @ H @ W @ De_inv @ H.T @ Dv_is @ X @ P


def softmax_lse(z):
    out = np.empty_like(z)
    for i, row in enumerate(z):
        m = row.max()
        lse = m + np.log(np.sum(np.exp(row - m)))
        out[i] = np.exp(row - lse)
    return out


def attention_scores(x, Wq, Wk):
    """``H[j, i] = softmax_m(x_m^T Wk^T Wq x_i)[j]`` with a forced unit diagonal."""
    N = len(x)
    H = np.zeros((N, N))
    for i in range(N):
        s = np.array([x[m] @ Wk.T @ Wq @ x[i] for m in range(N)])
        s = s - s.max()
        p = np.exp(s) / np.exp(s).sum()
        for j in range(N):
            H[j, i] = 1.0 if j == i else p[j]
    return H


def mlp(x, Ws, bs):
    h = x
    for k, (W, b) in enumerate(zip(Ws, bs)):
        h = h @ W + b
        if k < len(Ws) - 1:
            h = np.maximum(h, 0.0)
    return h
