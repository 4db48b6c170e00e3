"""Replay, soft critic targets, counterfactual-baseline policy gradient, and the training loop."""
from __future__ import annotations

import ctypes
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .agents import (
    ALGO_MODES,
    Actors,
    AgentLayout,
    CriticConfig,
    CriticInput,
    HypergraphCritic,
    counterfactual_q,
    one_hot,
)
from .approximator import Adam, ParamStore, polyak_update
from .errors import ConfigError, ContractViolation, NumericError


@dataclass
class TrainConfig:
    gamma: float = 0.99
    omega: float = 0.01
    tau: float = 0.005
    batch_size: int = 256
    buffer_capacity: int = 100_000
    updates_per_cycle: int = 4
    steps_per_update: int = 100
    episode_length: int = 25
    total_episodes: int = 5000
    workers: int = 2
    seed: int = 0
    lr_critic: float = 1e-3
    lr_actor: float = 1e-3
    n_heads: int = 4
    critic_grad_clip: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.omega < 0.0:
            raise ConfigError(f"omega must be non-negative, got {self.omega}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        for name in ("batch_size", "buffer_capacity", "updates_per_cycle", "steps_per_update", "episode_length", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.total_episodes < 0:
            raise ConfigError("total_episodes must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Transition:
    obs: list
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: list
    done: bool = False


@dataclass
class Batch:
    obs: list
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: list
    done: np.ndarray

    def __len__(self):
        return len(self.actions)


class ReplayBuffer:
    """Fixed-capacity ring of transitions stored column-wise per agent."""

    def __init__(self, capacity: int, obs_dims):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = capacity
        n = len(obs_dims)
        self.obs = [np.zeros((capacity, d)) for d in obs_dims]
        self.next_obs = [np.zeros((capacity, d)) for d in obs_dims]
        self.actions = np.zeros((capacity, n), dtype=np.int64)
        self.rewards = np.zeros((capacity, n))
        self.done = np.zeros(capacity)
        self.size = 0
        self._next = 0
        self._lock = threading.Lock()

    def __len__(self):
        return self.size

    def push(self, tr: Transition) -> None:
        rewards = np.asarray(tr.rewards, dtype=np.float64)
        if not np.all(np.isfinite(rewards)):
            raise NumericError("non-finite reward pushed to replay")
        with self._lock:
            k = self._next
            for i, o in enumerate(tr.obs):
                self.obs[i][k] = o
            for i, o in enumerate(tr.next_obs):
                self.next_obs[i][k] = o
            self.actions[k] = tr.actions
            self.rewards[k] = rewards
            self.done[k] = float(tr.done)
            self._next = (k + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def extend(self, transitions) -> None:
        for tr in transitions:
            self.push(tr)

    def ordered_indices(self) -> np.ndarray:
        """Stored slots from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def take(self, idx) -> Batch:
        return Batch(
            [o[idx] for o in self.obs],
            self.actions[idx],
            self.rewards[idx],
            [o[idx] for o in self.next_obs],
            self.done[idx],
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size < batch_size:
            raise ContractViolation(f"replay holds {self.size} transitions, batch needs {batch_size}")
        return self.take(rng.integers(0, self.size, size=batch_size))


# -- losses ------------------------------------------------------------------

def sample_joint(actors: Actors, params: ParamStore, obs, rng):
    """One joint action sample and its per-agent log-probabilities, both ``(B, N)``."""
    acts, logps = [], []
    for i in range(actors.layout.n_agents):
        dist = actors.forward(params, i, obs[i])
        a = dist.sample(rng)
        acts.append(a)
        logps.append(np.take_along_axis(dist.log_probs, a[:, None], axis=-1)[:, 0])
    return np.stack(acts, axis=1), np.stack(logps, axis=1)


def compute_targets(batch: Batch, critic: HypergraphCritic, target_critic_params: ParamStore,
                    actors: Actors, target_actor_params: ParamStore, cfg: TrainConfig, rng):
    """``r + gamma (1 - done) (Q_target(o', a') - omega log pi_target(a'_i | o'_i))``.

    The expectation over ``a'`` is replaced by one joint sample from the target
    policies. Only target parameters are read; no gradients are touched.
    """
    a_next, logp_next = sample_joint(actors, target_actor_params, batch.next_obs, rng)
    inp = CriticInput.from_indices(batch.next_obs, a_next, critic.layout)
    q_next = critic.forward(target_critic_params, inp).q
    soft = q_next - cfg.omega * logp_next
    targets = batch.rewards + cfg.gamma * (1.0 - batch.done)[:, None] * soft
    if not np.all(np.isfinite(targets)):
        raise NumericError("non-finite critic targets")
    return targets


def critic_loss(batch: Batch, critic: HypergraphCritic, params: ParamStore, targets) -> float:
    """Sum over agents of the batch-mean squared TD error; fills ``params`` gradients."""
    params.zero_grad()
    inp = CriticInput.from_indices(batch.obs, batch.actions, critic.layout)
    out, cache = critic.forward(params, inp, record=True)
    err = out.q - targets
    B = err.shape[0]
    critic.backward(params, cache, 2.0 * err / B)
    return float((err**2).sum() / B)


def advantage(probs, q_cf, actions):
    """Counterfactual advantage ``Q(a_i) - sum_a pi(a) Q(a)`` with the exact baseline."""
    baseline = (probs * q_cf).sum(axis=-1)
    taken = np.take_along_axis(q_cf, np.asarray(actions)[:, None], axis=-1)[:, 0]
    return taken - baseline, baseline


def policy_gradient(batch: Batch, critic: HypergraphCritic, critic_params: ParamStore,
                    actors: Actors, actor_params: ParamStore, cfg: TrainConfig, rng):
    """Fill actor gradients with the entropy-regularised counterfactual policy gradient.

    Gradients are of the loss ``-mean[log pi(a_i) * (A - omega (log pi(a_i) + H))]``
    with ``a_i`` freshly sampled and the other agents' actions taken from the
    batch. ``H`` is the policy entropy at that observation; it does not depend
    on ``a_i`` so the expected gradient is that of the uncentred form, but the
    single-sample estimate of the entropy term is far less noisy.
    Returns ``(actor_loss, mean_entropy)``.
    """
    actor_params.zero_grad()
    inp = CriticInput.from_indices(batch.obs, batch.actions, critic.layout)
    B = len(batch)
    rows = np.arange(B)
    total, entropy = 0.0, 0.0
    for i in range(actors.layout.n_agents):
        dist, rec = actors.forward(actor_params, i, batch.obs[i], record=True)
        a = dist.sample(rng)
        q_cf = counterfactual_q(inp, i, critic_params, critic)
        adv, _ = advantage(dist.probs, q_cf, a)
        logp = dist.log_probs[rows, a]
        weight = adv - cfg.omega * (logp + dist.entropy())
        total += float(-(logp * weight).mean())
        entropy += float(dist.entropy().mean())
        g_logits = -(one_hot(a, dist.probs.shape[-1]) - dist.probs) * (weight / B)[:, None]
        actors.backward(actor_params, i, rec, g_logits)
    return total, entropy / actors.layout.n_agents


# -- learner -------------------------------------------------------------------

def critic_config_for(mode: str, scenario, cfg: TrainConfig) -> CriticConfig:
    mode = ALGO_MODES.get(mode, mode)
    groups = getattr(scenario, "static_groups", None) if mode == "static" else None
    if mode == "static" and not groups:
        raise ConfigError("HGAC-CON needs static_groups in the scenario config")
    return CriticConfig(mode=mode, n_heads=cfg.n_heads, static_groups=groups)


class Learner:
    """Online and target networks for one experiment, with their optimisers."""

    def __init__(self, layout: AgentLayout, critic_config: CriticConfig, cfg: TrainConfig, rng):
        self.layout = layout
        self.cfg = cfg
        self.critic = HypergraphCritic(layout, critic_config)
        self.actors = Actors(layout)
        self.critic_params = self.critic.init_params(rng)
        self.actor_params = self.actors.init_params(rng)
        self.target_critic_params = self.critic_params.copy()
        self.target_actor_params = self.actor_params.copy()
        self.critic_opt = Adam(self.critic_params, lr=cfg.lr_critic, max_grad_norm=cfg.critic_grad_clip)
        self.actor_opt = Adam(self.actor_params, lr=cfg.lr_actor)

    def update(self, batch: Batch, rng) -> dict:
        cfg = self.cfg
        targets = compute_targets(batch, self.critic, self.target_critic_params,
                                  self.actors, self.target_actor_params, cfg, rng)
        c_loss = critic_loss(batch, self.critic, self.critic_params, targets)
        self.critic_opt.step()
        a_loss, ent = policy_gradient(batch, self.critic, self.critic_params,
                                      self.actors, self.actor_params, cfg, rng)
        self.actor_opt.step()
        polyak_update(self.target_critic_params, self.critic_params, cfg.tau)
        polyak_update(self.target_actor_params, self.actor_params, cfg.tau)
        return {"critic_loss": c_loss, "actor_loss": a_loss, "entropy": ent}

    def checkpoint(self) -> ParamStore:
        return ParamStore.merged({
            "critic": self.critic_params,
            "actor": self.actor_params,
            "target_critic": self.target_critic_params,
            "target_actor": self.target_actor_params,
        })

    def restore(self, store: ParamStore) -> None:
        self.critic_params.assign(store.split("critic"))
        self.actor_params.assign(store.split("actor"))
        self.target_critic_params.assign(store.split("target_critic"))
        self.target_actor_params.assign(store.split("target_actor"))


def layout_of(scenario) -> AgentLayout:
    spec = scenario.spec()
    return AgentLayout(tuple(spec.roles), tuple(spec.obs_dims), tuple(spec.act_dims))


# -- rollouts ---------------------------------------------------------------------

@dataclass
class Episode:
    transitions: list
    returns: np.ndarray
    entropy: float
    final_state: object = None


def run_episode(env, policy, rng, env_seed, horizon) -> Episode:
    """Roll out one episode; ``policy(obs, state, rng) -> (actions, entropy)``."""
    state, obs = env.reset(env_seed)
    transitions = []
    returns = np.zeros(env.n_agents)
    entropy = 0.0
    for _ in range(horizon):
        actions, ent = policy(obs, state, rng)
        try:
            res = env.step(state, actions)
        except Exception as exc:
            raise RuntimeError(f"environment fault: {exc}") from exc
        transitions.append(Transition(obs, np.asarray(actions), res.rewards, res.obs, res.done))
        returns += res.rewards
        entropy += ent
        state, obs = res.state, res.obs
        if res.done:
            break
    return Episode(transitions, returns, entropy / max(len(transitions), 1), state)


class RolloutWorker:
    """Owns one environment instance and an independent RNG stream."""

    def __init__(self, env, seed_seq: np.random.SeedSequence, horizon: int):
        self.env = env
        self.rng = np.random.default_rng(seed_seq)
        self.horizon = horizon

    def collect(self, actors: Actors, actor_params: ParamStore) -> Episode:
        env_seed = int(self.rng.integers(2**63 - 1))

        def policy(obs, state, rng):
            return actors.act(actor_params, obs, rng)

        return run_episode(self.env, policy, self.rng, env_seed, self.horizon)


@dataclass
class MetricsRow:
    episode: int
    team_return: float
    agent_returns: list
    critic_loss: float
    actor_loss: float
    entropy: float
    seconds: float = field(default=0.0)


def _keep_heap():
    """Stop glibc from returning freed update buffers to the OS after every call.

    The critic allocates and frees a few MB per forward pass; with the default
    thresholds each of those turns into mmap/munmap plus page faults, which
    costs about as much as the arithmetic. Best effort, no-op off glibc.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


class Trainer:
    """Alternates rollout collection (actors on local observations) with update cycles."""

    def __init__(self, env, cfg: TrainConfig, mode: str, env_factory=None):
        _keep_heap()
        self.env = env
        self.cfg = cfg
        self.mode = mode
        root = np.random.SeedSequence(cfg.seed)
        init_ss, learn_ss, *worker_ss = root.spawn(2 + cfg.workers)
        self.layout = layout_of(env)
        self.learner = Learner(self.layout, critic_config_for(mode, env, cfg), cfg, np.random.default_rng(init_ss))
        self.rng = np.random.default_rng(learn_ss)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, self.layout.obs_dims)
        factory = env_factory or (lambda: env)
        envs = [env] + [factory() for _ in range(cfg.workers - 1)]
        self.workers = [RolloutWorker(e, ss, cfg.episode_length) for e, ss in zip(envs, worker_ss)]
        self.last_episode: Episode | None = None
        self.n_updates = 0

    def _collect_round(self, n):
        workers = self.workers[:n]
        actors, params = self.learner.actors, self.learner.actor_params
        if n == 1:
            return [workers[0].collect(actors, params)]
        with ThreadPoolExecutor(max_workers=n) as pool:
            futures = [pool.submit(w.collect, actors, params) for w in workers]
            episodes = []
            for f in futures:
                ep = f.result()
                self.buffer.extend(ep.transitions)
                episodes.append(ep)
            return episodes

    def run(self):
        """Yield one :class:`MetricsRow` per episode."""
        cfg = self.cfg
        start = time.perf_counter()
        episode = 0
        pending_steps = 0
        last = {"critic_loss": float("nan"), "actor_loss": float("nan")}
        while episode < cfg.total_episodes:
            n = min(len(self.workers), cfg.total_episodes - episode)
            try:
                episodes = self._collect_round(n)
            except RuntimeError as exc:
                raise RuntimeError(f"episode {episode}: {exc}") from exc
            if n == 1:
                self.buffer.extend(episodes[0].transitions)
            pending_steps += sum(len(ep.transitions) for ep in episodes)
            if len(self.buffer) < cfg.batch_size:
                pending_steps %= cfg.steps_per_update
            while pending_steps >= cfg.steps_per_update and len(self.buffer) >= cfg.batch_size:
                pending_steps -= cfg.steps_per_update
                stats = [self.learner.update(self.buffer.sample(cfg.batch_size, self.rng), self.rng)
                         for _ in range(cfg.updates_per_cycle)]
                self.n_updates += len(stats)
                last = {k: float(np.mean([s[k] for s in stats])) for k in ("critic_loss", "actor_loss")}
            for ep in episodes:
                yield MetricsRow(
                    episode=episode,
                    team_return=float(ep.returns.mean()),
                    agent_returns=[float(r) for r in ep.returns],
                    critic_loss=last["critic_loss"],
                    actor_loss=last["actor_loss"],
                    entropy=ep.entropy,
                    seconds=time.perf_counter() - start,
                )
                episode += 1
            self.last_episode = episodes[-1]


def train_loop(env, cfg: TrainConfig, mode: str):
    """Generator over per-episode metrics; see :class:`Trainer`."""
    return Trainer(env, cfg, mode).run()
