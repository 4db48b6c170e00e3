"""Decentralized categorical actors and the centralized hypergraph-convolution critic."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .approximator import (
    MlpSpec,
    ParamStore,
    dense,
    glorot,
    init_mlp,
    log_softmax,
    mlp_backward,
    mlp_forward,
    softmax,
    softmax_backward,
)
from . import kernels
from .errors import ConfigError
from .hypergraph import EPS_DEG, static_incidence

MODES = ("mlp", "attention", "static")
ALGO_MODES = {"hgac": "mlp", "att-hgac": "attention", "hgac-con": "static"}


def _split_heads(a, K):
    """``(R, K*F)`` -> ``(K, R, F)``."""
    R = a.shape[0]
    return np.ascontiguousarray(a.reshape(R, K, -1).transpose(1, 0, 2))


def _merge_heads(a):
    """``(K, ..., F)`` -> ``(R, K*F)`` with ``R`` the flattened middle axes."""
    K = a.shape[0]
    F = a.shape[-1]
    return a.reshape(K, -1, F).transpose(1, 0, 2).reshape(-1, K * F)


def one_hot(indices, n):
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros(indices.shape + (n,))
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


@dataclass(frozen=True)
class AgentLayout:
    """Per-agent roles and observation / action sizes of one scenario."""

    roles: tuple[str, ...]
    obs_dims: tuple[int, ...]
    act_dims: tuple[int, ...]

    def __post_init__(self):
        n = len(self.roles)
        if n == 0 or len(self.obs_dims) != n or len(self.act_dims) != n:
            raise ConfigError("roles, obs_dims and act_dims must be non-empty and equally long")
        for r in set(self.roles):
            dims = {(o, a) for rr, o, a in zip(self.roles, self.obs_dims, self.act_dims) if rr == r}
            if len(dims) != 1:
                raise ConfigError(f"agents of role {r!r} disagree on observation/action sizes")

    @property
    def n_agents(self) -> int:
        return len(self.roles)

    def role_names(self) -> list[str]:
        return list(dict.fromkeys(self.roles))

    def members(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]


# -- actors -------------------------------------------------------------------

@dataclass
class PolicyDistribution:
    probs: np.ndarray
    log_probs: np.ndarray

    def entropy(self):
        return -(self.probs * self.log_probs).sum(axis=-1)

    def sample(self, rng: np.random.Generator):
        u = rng.random(self.probs.shape[:-1])
        cdf = np.cumsum(self.probs, axis=-1)
        idx = (cdf < u[..., None]).sum(axis=-1)
        return np.minimum(idx, self.probs.shape[-1] - 1)


class Actors:
    """One policy MLP per role; agents of the same role share its parameters."""

    def __init__(self, layout: AgentLayout, hidden=(64, 64)):
        self.layout = layout
        self.specs = {}
        for role in layout.role_names():
            i = layout.members(role)[0]
            self.specs[role] = MlpSpec((layout.obs_dims[i], *hidden, layout.act_dims[i]))

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        params = ParamStore()
        for role, spec in self.specs.items():
            init_mlp(spec, params, f"actor.{role}", rng)
        return params

    def forward(self, params: ParamStore, agent: int, obs, record=False):
        role = self.layout.roles[agent]
        logits, rec = mlp_forward(self.specs[role], params, f"actor.{role}", obs, record=record)
        logp = log_softmax(logits)
        dist = PolicyDistribution(np.exp(logp), logp)
        return (dist, rec) if record else dist

    def backward(self, params: ParamStore, agent: int, rec, g_logits):
        role = self.layout.roles[agent]
        mlp_backward(self.specs[role], params, f"actor.{role}", rec, g_logits, need_input_grad=False)

    def act(self, params: ParamStore, obs_list, rng: np.random.Generator):
        """Sample one action per agent from local observations only."""
        actions = np.empty(self.layout.n_agents, dtype=np.int64)
        entropy = 0.0
        for role in self.layout.role_names():
            idx = self.layout.members(role)
            obs = np.stack([obs_list[i] for i in idx])
            dist = self.forward(params, idx[0], obs)
            actions[idx] = dist.sample(rng)
            entropy += float(dist.entropy().sum())
        return actions, entropy / self.layout.n_agents


def actor_forward(obs_i, actor_params: ParamStore, actors: Actors, agent: int) -> PolicyDistribution:
    return actors.forward(actor_params, agent, obs_i)


# -- critic -------------------------------------------------------------------

@dataclass
class CriticInput:
    """Per-agent observations ``(B, o_i)`` and one-hot actions ``(B, A_i)``."""

    obs: list
    actions: list

    @classmethod
    def from_indices(cls, obs, actions, layout: AgentLayout):
        actions = np.asarray(actions)
        acts = [one_hot(actions[..., i], layout.act_dims[i]) for i in range(layout.n_agents)]
        return cls([np.asarray(o, dtype=np.float64) for o in obs], acts)

    def with_action(self, agent: int, action: int) -> CriticInput:
        acts = list(self.actions)
        sub = np.zeros_like(acts[agent])
        sub[..., action] = 1.0
        acts[agent] = sub
        return CriticInput(self.obs, acts)


@dataclass
class CriticOutput:
    q: np.ndarray
    incidence_per_head: list = field(default_factory=list)


@dataclass
class CriticConfig:
    mode: str = "mlp"
    n_heads: int = 4
    embed_dim: int = 32
    conv_hidden: int = 32
    conv_out: int = 32
    n_edges: int | None = None
    generator_hidden: int = 64
    attn_dim: int = 32
    q_hidden: tuple = (64, 64)
    static_groups: list | None = None


class HypergraphCritic:
    """Multi-head hypergraph-convolution critic shared by all agents.

    Per agent, ``(o_i, a_i)`` is embedded (one linear map per role) to ``x_i``.
    Each head builds an incidence matrix from the embeddings (or uses the
    static one), applies two convolution layers (ReLU, then linear), and the
    Q head reads ``concat(x_i, x'_i1, ..., x'_iK)`` through a ReLU MLP with
    a linear output.
    """

    def __init__(self, layout: AgentLayout, config: CriticConfig):
        if config.mode not in MODES:
            raise ConfigError(f"unknown critic mode {config.mode!r}; choose from {MODES}")
        if config.n_heads < 1:
            raise ConfigError("need at least one head")
        self.layout = layout
        self.config = config
        n = layout.n_agents
        if config.mode == "static":
            if not config.static_groups:
                raise ConfigError("static mode needs hyperedge groups in the scenario config")
            self.H_static = static_incidence(config.static_groups, n)
            self.n_edges = self.H_static.shape[1]
        elif config.mode == "attention":
            if config.n_edges not in (None, n):
                raise ConfigError("attention incidence uses one hyperedge per agent")
            self.H_static = None
            self.n_edges = n
        else:
            self.H_static = None
            self.n_edges = config.n_edges or n
            if self.n_edges < 1:
                raise ConfigError("need at least one hyperedge")
        # hyperedge -> weight parameter; attention hyperedges are centred on
        # agents, so they share one weight per role to keep relabelling
        # same-role agents a pure permutation of the output
        if config.mode == "attention":
            roles = layout.role_names()
            self.weight_index = np.array([roles.index(r) for r in layout.roles])
        else:
            self.weight_index = np.arange(self.n_edges)
        self.n_weights = int(self.weight_index.max()) + 1
        D = config.embed_dim
        self.q_spec = MlpSpec((D + config.n_heads * config.conv_out, *config.q_hidden, 1))

    # parameters ------------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        c = self.config
        D = c.embed_dim
        params = ParamStore()
        for role in self.layout.role_names():
            i = self.layout.members(role)[0]
            d_in = self.layout.obs_dims[i] + self.layout.act_dims[i]
            params.add(f"embed.{role}.W", glorot(rng, d_in, D))
            params.add(f"embed.{role}.b", np.zeros(D))
        for k in range(c.n_heads):
            h = f"head{k}"
            if c.mode == "mlp":
                init_mlp(MlpSpec((D, c.generator_hidden, self.n_edges)), params, f"{h}.gen", rng)
            elif c.mode == "attention":
                params.add(f"{h}.Wq", glorot(rng, c.attn_dim, D))
                params.add(f"{h}.Wk", glorot(rng, c.attn_dim, D))
            params.add(f"{h}.log_w", np.zeros(self.n_weights))
            params.add(f"{h}.P1", glorot(rng, D, c.conv_hidden))
            params.add(f"{h}.P2", glorot(rng, c.conv_hidden, c.conv_out))
        init_mlp(self.q_spec, params, "q", rng)
        return params

    # forward / backward ------------------------------------------------------

    def _embed(self, params, inp: CriticInput):
        obs0 = np.asarray(inp.obs[0])
        B = obs0.shape[0]
        X = np.empty((B, self.layout.n_agents, self.config.embed_dim))
        role_inputs = {}
        for role in self.layout.role_names():
            idx = self.layout.members(role)
            z = np.stack([np.concatenate([inp.obs[i], inp.actions[i]], axis=-1) for i in idx], axis=1)
            X[:, idx, :] = dense(z, params[f"embed.{role}.W"]) + params[f"embed.{role}.b"]
            role_inputs[role] = z
        return X, role_inputs

    def forward(self, params: ParamStore, inp: CriticInput, record=False, agents=None):
        """Returns ``CriticOutput`` (and a backward cache when ``record``).

        ``agents`` restricts which ``Q_i`` are evaluated; the others are NaN.
        The K heads are evaluated together along a leading head axis.
        """
        squeeze = np.asarray(inp.obs[0]).ndim == 1
        if squeeze:
            inp = CriticInput([np.asarray(o)[None] for o in inp.obs], [np.asarray(a)[None] for a in inp.actions])
        self._check_input(inp)
        c = self.config
        K = c.n_heads
        X, role_inputs = self._embed(params, inp)
        B, N, D = X.shape
        Xr = X.reshape(B * N, D)
        cache = {"role_inputs": role_inputs, "X": X}

        if c.mode == "mlp":
            W0 = np.concatenate([params[f"head{k}.gen.W0"] for k in range(K)], axis=1)
            b0 = np.concatenate([params[f"head{k}.gen.b0"] for k in range(K)])
            W1 = np.stack([params[f"head{k}.gen.W1"] for k in range(K)])
            b1 = np.stack([params[f"head{k}.gen.b1"] for k in range(K)])
            Z0 = Xr @ W0 + b0
            A0 = _split_heads(np.maximum(Z0, 0.0), K)
            H = softmax(A0 @ W1 + b1[:, None, :], axis=-1)
            cache.update(gen=(W0, W1, Z0, A0, H))
            H = H.reshape(K, B, N, self.n_edges)
        elif c.mode == "attention":
            Wq = np.concatenate([params[f"head{k}.Wq"] for k in range(K)])
            Wk = np.concatenate([params[f"head{k}.Wk"] for k in range(K)])
            Qh = _split_heads(Xr @ Wq.T, K).reshape(K, B, N, -1)
            Kh = _split_heads(Xr @ Wk.T, K).reshape(K, B, N, -1)
            A = softmax(Qh @ np.swapaxes(Kh, -1, -2), axis=-1)
            H = np.swapaxes(A, -1, -2).copy()
            diag = np.arange(N)
            H[..., diag, diag] = 1.0
            cache.update(gen=(Wq, Wk, Qh, Kh, A))
        else:
            H = np.broadcast_to(self.H_static, (K, B) + self.H_static.shape)

        M = self.n_edges
        w = np.exp(np.stack([params[f"head{k}.log_w"] for k in range(K)]))[:, self.weight_index]
        Hf = np.ascontiguousarray(H).reshape(K * B, N, M)
        wf = np.repeat(w, B, axis=0)
        Gf, dv, de = kernels.propagation_forward(Hf, wf, EPS_DEG)
        G = Gf.reshape(K, B, N, N)

        P1 = np.concatenate([params[f"head{k}.P1"] for k in range(K)], axis=1)
        P2 = np.stack([params[f"head{k}.P2"] for k in range(K)])
        Y1 = _split_heads(Xr @ P1, K).reshape(K, B, N, -1)
        Z1 = G @ Y1
        X1 = np.maximum(Z1, 0.0)
        Y2 = (X1.reshape(K, B * N, -1) @ P2).reshape(K, B, N, -1)
        X2 = G @ Y2
        feats = np.concatenate([X, X2.transpose(1, 2, 0, 3).reshape(B, N, -1)], axis=-1)
        cache.update(Hf=Hf, wf=wf, w=w, dv=dv, de=de, G=G, P1=P1, P2=P2, Y1=Y1, Z1=Z1, X1=X1, Y2=Y2)

        # the Q head runs per agent so any single Q_i is computed with the same
        # GEMM shapes whether or not the other agents' values are requested
        q = np.full((B, N), np.nan)
        q_rec = {}
        for i in range(N) if agents is None else agents:
            qi, q_rec[i] = mlp_forward(self.q_spec, params, "q", np.ascontiguousarray(feats[:, i, :]), record=record)
            q[:, i] = qi[:, 0]
        incidences = [H[k] for k in range(K)]
        if squeeze:
            q = q[0]
            incidences = [h[0] for h in incidences]
        output = CriticOutput(q, incidences)
        if record:
            if squeeze:
                raise ConfigError("backward needs batched input")
            cache.update(q_rec=q_rec, feats_shape=feats.shape)
            return output, cache
        return output

    def backward(self, params: ParamStore, cache, g_q) -> None:
        """Accumulate gradients of ``sum(g_q * q)`` into ``params``."""
        c = self.config
        K, D = c.n_heads, c.embed_dim
        X = cache["X"]
        B, N, _ = X.shape
        Xr = X.reshape(B * N, D)
        gF = np.zeros(cache["feats_shape"])
        for i, rec in cache["q_rec"].items():
            gF[:, i, :] = mlp_backward(self.q_spec, params, "q", rec, g_q[:, i, None])
        gXr = gF[..., :D].reshape(B * N, D).copy()
        gX2 = gF[..., D:].reshape(B, N, K, -1).transpose(2, 0, 1, 3)

        G, Y1, Z1, X1, Y2 = cache["G"], cache["Y1"], cache["Z1"], cache["X1"], cache["Y2"]
        P1, P2 = cache["P1"], cache["P2"]
        Gt = np.swapaxes(G, -1, -2)
        gG = gX2 @ np.swapaxes(Y2, -1, -2)
        gY2 = (Gt @ gX2).reshape(K, B * N, -1)
        gP2 = np.swapaxes(X1.reshape(K, B * N, -1), -1, -2) @ gY2
        gZ1 = (gY2 @ np.swapaxes(P2, -1, -2)).reshape(Z1.shape) * (Z1 > 0.0)
        gG += gZ1 @ np.swapaxes(Y1, -1, -2)
        gY1 = _merge_heads(Gt @ gZ1)
        gP1 = Xr.T @ gY1
        gXr += gY1 @ P1.T
        gHf, gwf = kernels.propagation_backward(
            cache["Hf"], cache["wf"], cache["dv"], cache["de"], np.ascontiguousarray(gG.reshape(K * B, N, N)), EPS_DEG
        )
        g_edge = gwf.reshape(K, B, -1).sum(axis=1) * cache["w"]
        g_logw = np.zeros((K, self.n_weights))
        np.add.at(g_logw, (slice(None), self.weight_index), g_edge)
        Hd = c.conv_hidden
        for k in range(K):
            params.accumulate(f"head{k}.P1", gP1[:, k * Hd : (k + 1) * Hd])
            params.accumulate(f"head{k}.P2", gP2[k])
            params.accumulate(f"head{k}.log_w", g_logw[k])

        if c.mode == "mlp":
            W0, W1, Z0, A0, H = cache["gen"]
            gL = softmax_backward(H, gHf.reshape(H.shape), axis=-1)
            gW1 = np.swapaxes(A0, -1, -2) @ gL
            gb1 = gL.sum(axis=1)
            gZ0 = _merge_heads(gL @ np.swapaxes(W1, -1, -2)) * (Z0 > 0.0)
            gW0 = Xr.T @ gZ0
            gb0 = gZ0.sum(axis=0)
            gXr += gZ0 @ W0.T
            gh = c.generator_hidden
            for k in range(K):
                params.accumulate(f"head{k}.gen.W0", gW0[:, k * gh : (k + 1) * gh])
                params.accumulate(f"head{k}.gen.b0", gb0[k * gh : (k + 1) * gh])
                params.accumulate(f"head{k}.gen.W1", gW1[k])
                params.accumulate(f"head{k}.gen.b1", gb1[k])
        elif c.mode == "attention":
            Wq, Wk, Qh, Kh, A = cache["gen"]
            gA = np.swapaxes(gHf.reshape(A.shape), -1, -2).copy()
            diag = np.arange(N)
            gA[..., diag, diag] = 0.0
            gS = softmax_backward(A, gA, axis=-1)
            gQ = _merge_heads((gS @ Kh).reshape(K, B * N, -1))
            gK = _merge_heads((np.swapaxes(gS, -1, -2) @ Qh).reshape(K, B * N, -1))
            gWq = gQ.T @ Xr
            gWk = gK.T @ Xr
            gXr += gQ @ Wq + gK @ Wk
            da = c.attn_dim
            for k in range(K):
                params.accumulate(f"head{k}.Wq", gWq[k * da : (k + 1) * da])
                params.accumulate(f"head{k}.Wk", gWk[k * da : (k + 1) * da])

        gX = gXr.reshape(B, N, D)
        for role, z in cache["role_inputs"].items():
            idx = self.layout.members(role)
            g = gX[:, idx, :]
            params.accumulate(f"embed.{role}.W", z.reshape(-1, z.shape[-1]).T @ g.reshape(-1, D))
            params.accumulate(f"embed.{role}.b", g.reshape(-1, D).sum(axis=0))

    def _check_input(self, inp: CriticInput):
        n = self.layout.n_agents
        if len(inp.obs) != n or len(inp.actions) != n:
            raise ConfigError(f"critic expects {n} agents, got {len(inp.obs)} observations / {len(inp.actions)} actions")
        for i in range(n):
            if inp.obs[i].shape[-1] != self.layout.obs_dims[i] or inp.actions[i].shape[-1] != self.layout.act_dims[i]:
                raise ConfigError(f"agent {i}: input sizes do not match the scenario layout")


def critic_forward(inp: CriticInput, critic_params: ParamStore, critic: HypergraphCritic) -> CriticOutput:
    return critic.forward(critic_params, inp)


def counterfactual_q(inp: CriticInput, agent: int, critic_params: ParamStore, critic: HypergraphCritic):
    """``Q_agent`` for every action of ``agent`` with the other agents' actions held fixed.

    One full critic evaluation per action: the incidence matrices depend on
    the substituted action, so nothing is reused between evaluations.
    """
    n_act = critic.layout.act_dims[agent]
    cols = [critic.forward(critic_params, inp.with_action(agent, a), agents=[agent]).q[..., agent]
            for a in range(n_act)]
    return np.stack(cols, axis=-1)
