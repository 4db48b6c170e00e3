"""Incidence-matrix generation, degrees, and the normalized hypergraph convolution.

Shapes follow one convention throughout: vertices (agents) on axis -2 and
hyperedges on axis -1 of an incidence matrix ``H``; an optional leading batch
axis is allowed everywhere and is what the critic uses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .approximator import (
    MlpSpec,
    ParamStore,
    activation,
    dense,
    mlp_backward,
    mlp_forward,
    softmax,
    softmax_backward,
)
from .errors import ConfigError, NumericError

EPS_DEG = 1e-8


def _check_finite(name, arr):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise NumericError(f"non-finite value in {name} at index {bad}")


def hyperedge_weights(log_w) -> np.ndarray:
    """Positive hyperedge weights from their unconstrained (log) parameters."""
    return np.exp(np.asarray(log_w, dtype=np.float64))


def compute_degrees(H, w):
    """Vertex degrees ``d_v = H @ w`` and hyperedge degrees ``d_e = sum_v H``."""
    H = np.asarray(H, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if H.ndim < 2 or w.ndim != 1 or H.shape[-1] != w.shape[0]:
        raise ConfigError(f"incidence {H.shape} incompatible with hyperedge weights {w.shape}")
    return H @ w, H.sum(axis=-2)


# -- convolution -----------------------------------------------------------

@dataclass
class ConvRecord:
    X: np.ndarray
    H: np.ndarray
    w: np.ndarray
    P: np.ndarray
    G: np.ndarray
    dv: np.ndarray
    de: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    activation: str


def _as_batch(H):
    H = np.ascontiguousarray(H, dtype=np.float64)
    return (H[None], True) if H.ndim == 2 else (H, False)


def _weights_per_sample(w, B, M):
    w = np.asarray(w, dtype=np.float64)
    if w.shape == (M,):
        return np.ascontiguousarray(np.broadcast_to(w, (B, M)))
    if w.shape == (B, M):
        return np.ascontiguousarray(w)
    raise ConfigError(f"hyperedge weights {w.shape} incompatible with {M} hyperedges")


def propagation(H, w, eps=EPS_DEG):
    """``G = Dv^-1/2 H W De^-1 H^T Dv^-1/2`` for a single or batched ``H``.

    ``w`` is either one weight vector ``(M,)`` or one per sample ``(B, M)``.
    """
    Hb, squeeze = _as_batch(H)
    if Hb.ndim != 3:
        raise ConfigError(f"incidence must be (N, M) or (B, N, M), got {Hb.shape}")
    B, _, M = Hb.shape
    G, dv, de = kernels.propagation_forward(Hb, _weights_per_sample(w, B, M), eps)
    return (G[0], dv[0], de[0]) if squeeze else (G, dv, de)


def conv_forward(X, H, w, P, act="identity", G=None):
    """One convolution layer. ``G`` may be passed in when several layers share ``H``."""
    if G is None:
        G, dv, de = propagation(H, w)
    else:
        dv = de = None
    Y = dense(X, P)
    Z = G @ Y
    out = activation(act)[0](Z)
    return out, ConvRecord(X, H, w, P, G, dv, de, Y, Z, act)


def conv_backward(rec: ConvRecord, g_out):
    """Returns ``(gX, gG, gP)``; ``gG`` feeds :func:`propagation_backward`."""
    gZ = activation(rec.activation)[1](rec.Z, g_out)
    gG = gZ @ np.swapaxes(rec.Y, -1, -2)
    gY = np.swapaxes(rec.G, -1, -2) @ gZ
    gP = rec.X.reshape(-1, rec.X.shape[-1]).T @ gY.reshape(-1, gY.shape[-1])
    gX = dense(gY, rec.P.T)
    return gX, gG, gP


def propagation_backward(H, w, dv, de, gG, eps=EPS_DEG):
    """Returns ``(gH, gw)`` with ``gw`` shaped like ``w``."""
    Hb, squeeze = _as_batch(H)
    if squeeze:
        dv, de, gG = dv[None], de[None], gG[None]
    B, _, M = Hb.shape
    gH, gw = kernels.propagation_backward(
        Hb,
        _weights_per_sample(w, B, M),
        np.ascontiguousarray(dv),
        np.ascontiguousarray(de),
        np.ascontiguousarray(gG),
        eps,
    )
    if np.ndim(w) == 1:
        gw = gw.sum(axis=0)
    return (gH[0], gw) if squeeze else (gH, gw)


def hypergraph_convolve(X, H, w, P, act="identity"):
    """``act(Dv^-1/2 H W De^-1 H^T Dv^-1/2 X P)``.

    ``X`` is ``(..., N, F_in)``, ``H`` is ``(..., N, M)``, ``w`` is ``(M,)``
    and ``P`` is ``(F_in, F_out)``.
    """
    X = np.asarray(X, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    for name, arr in (("X", X), ("H", H), ("w", w), ("P", P)):
        _check_finite(name, arr)
    if X.shape[-2] != np.shape(H)[-2]:
        raise ConfigError(f"features for {X.shape[-2]} vertices but incidence has {np.shape(H)[-2]}")
    if X.shape[-1] != P.shape[0]:
        raise ConfigError(f"feature width {X.shape[-1]} does not match layer input {P.shape[0]}")
    out, _ = conv_forward(X, H, w, P, act)
    return out


# -- incidence generators -----------------------------------------------------

def generator_spec(in_dim: int, n_edges: int, hidden: int = 64) -> MlpSpec:
    if n_edges < 1:
        raise ConfigError(f"need at least one hyperedge, got {n_edges}")
    return MlpSpec((in_dim, hidden, n_edges), hidden="relu", output="identity")


@dataclass
class MlpIncidenceRecord:
    mlp: object
    H: np.ndarray


def mlp_incidence(features, params: ParamStore, prefix: str, n_edges: int, hidden: int = 64, record=False):
    """Row-wise ``softmax(MLP(features_i))`` over ``n_edges`` hyperedges."""
    features = np.asarray(features, dtype=np.float64)
    spec = generator_spec(features.shape[-1], n_edges, hidden)
    logits, rec = mlp_forward(spec, params, prefix, features, record=record)
    H = softmax(logits, axis=-1)
    return (H, MlpIncidenceRecord(rec, H)) if record else H


def mlp_incidence_backward(rec: MlpIncidenceRecord, params: ParamStore, prefix: str, n_edges, gH, hidden=64):
    spec = generator_spec(rec.mlp.inputs[0].shape[-1], n_edges, hidden)
    g_logits = softmax_backward(rec.H, gH, axis=-1)
    return mlp_backward(spec, params, prefix, rec.mlp, g_logits)


@dataclass
class AttentionRecord:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    A: np.ndarray


def attention_incidence(x, Wq, Wk, record=False):
    """Square incidence with hyperedge ``i`` centred on vertex ``i``.

    ``H[j, i] = softmax_m(k_m . q_i)[j]`` for ``j != i`` where ``q = Wq x`` and
    ``k = Wk x``; the softmax runs over every ``m`` including ``i``. The
    diagonal is then set to exactly 1.
    """
    x = np.asarray(x, dtype=np.float64)
    Wq = np.asarray(Wq, dtype=np.float64)
    Wk = np.asarray(Wk, dtype=np.float64)
    if Wq.shape != Wk.shape or Wq.shape[1] != x.shape[-1]:
        raise ConfigError(f"query/key maps {Wq.shape}, {Wk.shape} do not fit features of width {x.shape[-1]}")
    q = dense(x, Wq.T)
    k = dense(x, Wk.T)
    A = softmax(q @ np.swapaxes(k, -1, -2), axis=-1)
    H = np.swapaxes(A, -1, -2).copy()
    n = x.shape[-2]
    diag = np.arange(n)
    H[..., diag, diag] = 1.0
    return (H, AttentionRecord(x, q, k, A)) if record else H


def attention_incidence_backward(rec: AttentionRecord, Wq, Wk, gH):
    """Returns ``(gx, gWq, gWk)``; the forced diagonal carries no gradient."""
    gA = np.swapaxes(gH, -1, -2).copy()
    n = gA.shape[-1]
    diag = np.arange(n)
    gA[..., diag, diag] = 0.0
    gS = softmax_backward(rec.A, gA, axis=-1)
    gq = gS @ rec.k
    gk = np.swapaxes(gS, -1, -2) @ rec.q
    x2 = rec.x.reshape(-1, rec.x.shape[-1])
    gWq = gq.reshape(-1, gq.shape[-1]).T @ x2
    gWk = gk.reshape(-1, gk.shape[-1]).T @ x2
    gx = dense(gq, Wq) + dense(gk, Wk)
    return gx, gWq, gWk


def static_incidence(groups, n_vertices: int) -> np.ndarray:
    """Hard 0/1 incidence with one hyperedge per group of vertex indices."""
    if n_vertices < 1:
        raise ConfigError("need at least one vertex")
    if len(groups) == 0:
        raise ConfigError("need at least one hyperedge group")
    H = np.zeros((n_vertices, len(groups)))
    for j, group in enumerate(groups):
        members = list(group)
        if not members:
            raise ConfigError(f"hyperedge group {j} is empty")
        for v in members:
            if not 0 <= int(v) < n_vertices:
                raise ConfigError(f"vertex index {v} in group {j} outside [0, {n_vertices})")
            H[int(v), j] = 1.0
    return H
