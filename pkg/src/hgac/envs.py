"""Desk-scale cooperative particle worlds: Cooperative Navigation, Treasure Collection, Rover-Tower.

Kinematics are direct displacement on the arena ``[-1, 1]^2``: movement
actions are ``{noop, +x, -x, +y, -y}`` by ``step_size``, clamped to the arena.
``step`` is pure: it returns a new :class:`WorldState` and never mutates its
input. No scenario has terminal states; the episode horizon is a time limit
handled by the learner.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation

MOVES = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
N_MOVES = len(MOVES)


@dataclass
class WorldState:
    agent_pos: np.ndarray
    landmark_pos: np.ndarray
    roles: tuple
    step: int = 0
    rng: np.random.Generator | None = None
    # CTC
    treasure_color: np.ndarray | None = None
    treasure_alive: np.ndarray | None = None
    carrying: np.ndarray | None = None
    bank_color: np.ndarray | None = None
    # RT
    pairing: np.ndarray | None = None
    goals: np.ndarray | None = None
    messages: np.ndarray | None = None

    def copy(self) -> WorldState:
        out = dataclasses.replace(self)
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                setattr(out, f.name, value.copy())
        if self.rng is not None:
            bg = self.rng.bit_generator
            clone = type(bg)()
            clone.state = bg.state
            out.rng = np.random.Generator(clone)
        return out


@dataclass
class StepResult:
    state: WorldState
    obs: list
    rewards: np.ndarray
    done: bool
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ShapeSpec:
    obs_dims: tuple
    act_dims: tuple
    roles: tuple


def load_scenario_config(name_or_path) -> dict:
    """Bundled config by name (e.g. ``cn_small``) or a path to a JSON file."""
    path = Path(str(name_or_path))
    if path.suffix == ".json" or path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        try:
            text = resources.files("hgac").joinpath("configs", f"{name_or_path}.json").read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"unknown scenario {name_or_path!r}") from None
    return json.loads(text)


def bundled_scenarios() -> list[str]:
    root = resources.files("hgac").joinpath("configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def make_env(config):
    if not isinstance(config, dict):
        config = load_scenario_config(config)
    kind = config.get("scenario")
    try:
        cls = SCENARIOS[kind]
    except KeyError:
        raise ConfigError(f"unknown scenario kind {kind!r}") from None
    return cls(config)


def _pair_dist(pos):
    diff = pos[:, None, :] - pos[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def _colliding_pairs(pos, radius):
    n = len(pos)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    d = _pair_dist(pos)
    i, j = np.triu_indices(n, k=1)
    hit = d[i, j] < radius
    return np.stack([i[hit], j[hit]], axis=1)


class Scenario:
    """Common plumbing; subclasses define layout, observations and rewards."""

    kind = ""

    def __init__(self, config: dict):
        self.config = dict(config)
        self.name = config.get("name", self.kind)
        self.step_size = float(config.get("step_size", 0.1))
        self.radius = float(config.get("radius", 0.1))
        self.episode_length = int(config.get("episode_length", 25))
        self.static_groups = config.get("static_groups")
        self._validate()

    def _validate(self):
        pass

    # interface ---------------------------------------------------------------

    @property
    def n_agents(self) -> int:
        return len(self.spec().roles)

    def spec(self) -> ShapeSpec:
        raise NotImplementedError

    def observation_spec(self):
        return self.spec().obs_dims

    def action_spec(self):
        return self.spec().act_dims

    def reset(self, seed):
        raise NotImplementedError

    def observe(self, state: WorldState) -> list:
        raise NotImplementedError

    def step(self, state: WorldState, joint_action) -> StepResult:
        actions = np.asarray(joint_action, dtype=np.int64).reshape(-1)
        act_dims = self.action_spec()
        if len(actions) != len(act_dims):
            raise ContractViolation(f"expected {len(act_dims)} actions, got {len(actions)}")
        for i, (a, n) in enumerate(zip(actions, act_dims)):
            if not 0 <= a < n:
                raise ContractViolation(f"agent {i}: action {a} outside [0, {n})")
        new = state.copy()
        new.step += 1
        rewards, info = self._transition(new, actions)
        return StepResult(new, self.observe(new), rewards, False, info)

    def _move(self, pos, actions):
        pos = pos + self.step_size * MOVES[actions]
        return np.clip(pos, -1.0, 1.0)

    def _transition(self, state, actions):
        raise NotImplementedError


class CooperativeNavigation(Scenario):
    """Hunters cover landmarks; shared reward ``-sum_l min_h dist - penalty * collisions``."""

    kind = "cn"

    def _validate(self):
        self.n_hunters = int(self.config.get("n_hunters", 2))
        self.n_landmarks = int(self.config.get("n_landmarks", self.n_hunters))
        self.collision_penalty = float(self.config.get("collision_penalty", 1.0))
        if self.n_hunters < 1 or self.n_landmarks < 1:
            raise ConfigError("cooperative navigation needs at least one hunter and one landmark")

    def spec(self):
        n, L = self.n_hunters, self.n_landmarks
        obs = 2 + 2 * (n - 1) + 2 * L
        return ShapeSpec((obs,) * n, (N_MOVES,) * n, ("hunter",) * n)

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        agents = rng.uniform(-1, 1, size=(self.n_hunters, 2))
        landmarks = rng.uniform(-1, 1, size=(self.n_landmarks, 2))
        state = WorldState(agents, landmarks, self.spec().roles, 0, rng)
        return state, self.observe(state)

    def observe(self, state):
        pos, lm = state.agent_pos, state.landmark_pos
        out = []
        for i in range(len(pos)):
            others = np.delete(pos, i, axis=0) - pos[i]
            out.append(np.concatenate([pos[i], others.ravel(), (lm - pos[i]).ravel()]))
        return out

    def shared_reward(self, state):
        d = np.sqrt(((state.agent_pos[:, None, :] - state.landmark_pos[None, :, :]) ** 2).sum(-1))
        cover = d.min(axis=0).sum()
        collisions = len(_colliding_pairs(state.agent_pos, self.radius))
        return -cover - self.collision_penalty * collisions, cover, collisions

    def _transition(self, state, actions):
        state.agent_pos = self._move(state.agent_pos, actions)
        r, cover, collisions = self.shared_reward(state)
        return np.full(self.n_hunters, r), {"collisions": collisions, "cover_distance": cover}


class TreasureCollection(Scenario):
    """Hunters pick up treasures and deliver them to the bank of the treasure's colour.

    Pickup gives the hunter ``pickup_reward``; a delivery gives every agent
    ``deposit_reward`` and respawns the treasure. Hunter-hunter and bank-bank
    contacts cost ``collision_penalty`` each (hunter-bank contact is a
    delivery, not a collision).
    """

    kind = "ctc"

    def _validate(self):
        c = self.config
        self.n_hunters = int(c.get("n_hunters", 3))
        self.n_banks = int(c.get("n_banks", 1))
        self.n_treasures = int(c.get("n_treasures", 2))
        self.pickup_reward = float(c.get("pickup_reward", 1.0))
        self.deposit_reward = float(c.get("deposit_reward", 1.0))
        self.collision_penalty = float(c.get("collision_penalty", 0.5))
        if self.n_hunters < 1 or self.n_banks < 1 or self.n_treasures < 1:
            raise ConfigError("treasure collection needs hunters, banks and treasures")

    def spec(self):
        n = self.n_hunters + self.n_banks
        K = self.n_banks
        obs = 2 + 2 * (n - 1) + self.n_treasures * (2 + 1 + K) + K
        roles = ("hunter",) * self.n_hunters + ("bank",) * self.n_banks
        return ShapeSpec((obs,) * n, (N_MOVES,) * n, roles)

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        n = self.n_hunters + self.n_banks
        agents = rng.uniform(-1, 1, size=(n, 2))
        treasures = rng.uniform(-1, 1, size=(self.n_treasures, 2))
        colors = rng.integers(0, self.n_banks, size=self.n_treasures)
        state = WorldState(
            agents,
            treasures,
            self.spec().roles,
            0,
            rng,
            treasure_color=colors,
            treasure_alive=np.ones(self.n_treasures, dtype=bool),
            carrying=np.full(self.n_hunters, -1, dtype=np.int64),
            bank_color=np.arange(self.n_banks),
        )
        return state, self.observe(state)

    def observe(self, state):
        pos = state.agent_pos
        K = self.n_banks
        tcol = np.eye(K)[state.treasure_color]
        out = []
        for i in range(len(pos)):
            others = np.delete(pos, i, axis=0) - pos[i]
            treasure = np.concatenate(
                [state.landmark_pos - pos[i], state.treasure_alive[:, None].astype(float), tcol], axis=1
            )
            carry = np.zeros(K)
            if i < self.n_hunters and state.carrying[i] >= 0:
                carry[state.treasure_color[state.carrying[i]]] = 1.0
            out.append(np.concatenate([pos[i], others.ravel(), treasure.ravel(), carry]))
        return out

    def _transition(self, state, actions):
        nh = self.n_hunters
        state.agent_pos = self._move(state.agent_pos, actions)
        hunters = state.agent_pos[:nh]
        banks = state.agent_pos[nh:]
        rewards = np.zeros(nh + self.n_banks)
        pickups = deposits = 0
        for h in range(nh):
            if state.carrying[h] < 0:
                for t in range(self.n_treasures):
                    if state.treasure_alive[t] and np.linalg.norm(hunters[h] - state.landmark_pos[t]) < self.radius:
                        state.treasure_alive[t] = False
                        state.carrying[h] = t
                        rewards[h] += self.pickup_reward
                        pickups += 1
                        break
            else:
                t = state.carrying[h]
                bank = int(state.treasure_color[t])
                if np.linalg.norm(hunters[h] - banks[bank]) < self.radius:
                    state.carrying[h] = -1
                    state.treasure_alive[t] = True
                    state.landmark_pos[t] = state.rng.uniform(-1, 1, size=2)
                    rewards += self.deposit_reward
                    deposits += 1
        collisions = 0
        for group in (np.arange(nh), np.arange(nh, nh + self.n_banks)):
            for i, j in _colliding_pairs(state.agent_pos[group], self.radius):
                rewards[group[i]] -= self.collision_penalty
                rewards[group[j]] -= self.collision_penalty
                collisions += 1
        return rewards, {"collisions": collisions, "pickups": pickups, "deposits": deposits}

    # carrying stores the treasure index internally; observations expose its colour
    def carried_color(self, state, h):
        t = state.carrying[h]
        return -1 if t < 0 else int(state.treasure_color[t])


class RoverTower(Scenario):
    """Rovers move blind; towers see their paired rover and its goal and send a symbol.

    Agents ``0..R-1`` are rovers and ``R..2R-1`` towers. Pairing and goals are
    redrawn every episode. A tower observes its rover's position, every
    landmark position, and a one-hot of the rover's goal landmark. A rover
    observes only the one-hot symbols all towers sent on the previous step.
    Both members of a pair receive ``-dist(rover, goal)``.
    """

    kind = "rt"

    def _validate(self):
        self.n_rovers = int(self.config.get("n_rovers", 2))
        self.n_landmarks = int(self.config.get("n_landmarks", self.n_rovers))
        if self.n_rovers < 1 or self.n_landmarks < 1:
            raise ConfigError("rover-tower needs rovers and landmarks")

    def spec(self):
        R, L = self.n_rovers, self.n_landmarks
        rover_obs = R * L
        tower_obs = 2 + 2 * L + L
        return ShapeSpec((rover_obs,) * R + (tower_obs,) * R, (N_MOVES,) * R + (L,) * R, ("rover",) * R + ("tower",) * R)

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        R, L = self.n_rovers, self.n_landmarks
        rovers = rng.uniform(-1, 1, size=(R, 2))
        landmarks = rng.uniform(-1, 1, size=(L, 2))
        pairing = rng.permutation(R)
        goals = rng.integers(0, L, size=R)
        # towers are static; their positions only matter for rendering
        towers = np.stack([np.linspace(-0.9, 0.9, R), np.full(R, 1.0)], axis=1)
        state = WorldState(
            np.concatenate([rovers, towers]),
            landmarks,
            self.spec().roles,
            0,
            rng,
            pairing=pairing,
            goals=goals,
            messages=np.full(R, -1, dtype=np.int64),
        )
        return state, self.observe(state)

    def tower_of(self, state, rover):
        return int(state.pairing[rover])

    def rover_of(self, state, tower):
        return int(np.flatnonzero(state.pairing == tower)[0])

    def observe(self, state):
        R, L = self.n_rovers, self.n_landmarks
        msgs = np.zeros((R, L))
        sent = state.messages >= 0
        msgs[np.flatnonzero(sent), state.messages[sent]] = 1.0
        rover_obs = msgs.ravel()
        out = [rover_obs.copy() for _ in range(R)]
        for t in range(R):
            r = self.rover_of(state, t)
            goal = np.zeros(L)
            goal[state.goals[r]] = 1.0
            out.append(np.concatenate([state.agent_pos[r], state.landmark_pos.ravel(), goal]))
        return out

    def pair_distances(self, state):
        R = self.n_rovers
        return np.linalg.norm(state.agent_pos[:R] - state.landmark_pos[state.goals], axis=1)

    def _transition(self, state, actions):
        R = self.n_rovers
        rovers = self._move(state.agent_pos[:R], actions[:R])
        state.agent_pos = np.concatenate([rovers, state.agent_pos[R:]])
        state.messages = actions[R:].copy()
        dist = self.pair_distances(state)
        rewards = np.empty(2 * R)
        rewards[:R] = -dist
        rewards[R + state.pairing] = -dist
        return rewards, {"distances": dist}


SCENARIOS = {cls.kind: cls for cls in (CooperativeNavigation, TreasureCollection, RoverTower)}
