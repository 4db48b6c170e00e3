"""Pure-numpy propagation kernel.

The propagation operator of a (soft) hypergraph is

    G = Dv^{-1/2} H W De^{-1} H^T Dv^{-1/2}

with ``dv = H @ w`` and ``de = H.sum(axis=0)``, both clamped below by ``eps``
before inversion. Everything here is batched over a leading axis:
``H`` is ``(B, N, M)``, ``w`` is ``(B, M)`` (one weight vector per sample),
``G`` is ``(B, N, N)``.
"""
import numpy as np


def propagation_forward(H, w, eps):
    dv = np.einsum("bim,bm->bi", H, w)
    de = H.sum(axis=1)
    s = 1.0 / np.sqrt(np.maximum(dv, eps))
    c = w / np.maximum(de, eps)
    Hs = H * s[:, :, None]
    G = (Hs * c[:, None, :]) @ Hs.transpose(0, 2, 1)
    return G, dv, de


def propagation_backward(H, w, dv, de, gG, eps):
    dv_c = np.maximum(dv, eps)
    de_c = np.maximum(de, eps)
    s = 1.0 / np.sqrt(dv_c)
    c = w / de_c
    Hs = H * s[:, :, None]

    gsym = gG + gG.transpose(0, 2, 1)
    gHs = (gsym @ Hs) * c[:, None, :]
    gc = np.einsum("bim,bim->bm", Hs, gG @ Hs)

    gH = gHs * s[:, :, None]
    gs = np.einsum("bim,bim->bi", gHs, H)

    gw = gc / de_c
    gde = np.where(de > eps, -gc * w / (de_c * de_c), 0.0)
    gdv = np.where(dv > eps, -0.5 * gs / (dv_c * np.sqrt(dv_c)), 0.0)

    gH += gdv[:, :, None] * w[:, None, :]
    gw += np.einsum("bi,bim->bm", gdv, H)
    gH += gde[:, None, :]
    return gH, gw
