"""Continuous-action gridworlds, scripted demonstrators and the discrete wrapper.

The agent lives in the unit square. An action is a direction; the agent moves
``step_length`` along it (zero actions do not move). Positions are clipped to
the square.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from aquadem.errors import InputError, NumericalError, StructuralError
from aquadem.quantizer import FixedCandidates

DEMO_FORMAT = "aquadem-demos"
DEMO_VERSION = 1
GENERATOR_VERSION = 1
MAX_BANG_BANG_ACTIONS = 10**6
_ZERO_ACTION = 1e-8


@dataclass(frozen=True)
class GridWorldConfig:
    step_length: float = 0.05
    max_steps: int = 200
    start_low: tuple = (0.0, 0.0)
    start_size: float = 0.1
    goal_low: tuple = (0.9, 0.9)
    goal_size: float = 0.1
    # demonstrator region thresholds
    bottom_left: float = 0.3


@dataclass(frozen=True)
class PlayGridWorldConfig:
    step_length: float = 0.05
    max_steps: int = 100
    start_low: tuple = (0.45, 0.45)
    start_size: float = 0.1
    goal_size: float = 0.1
    goals: tuple = ((0.9, 0.9), (0.0, 0.9), (0.9, 0.0), (0.0, 0.0))
    play_episode_length: int = 120


def _in_box(state, low, size):
    low = np.asarray(low)
    return bool(np.all(state >= low) and np.all(state <= low + size))


class GridWorld:
    """Sparse-reward navigation from the bottom-left square to the top-right square."""

    name = "gridworld"
    state_dim = 2
    action_dim = 2
    action_low = -np.ones(2)
    action_high = np.ones(2)

    def __init__(self, config: GridWorldConfig | None = None):
        self.config = config or GridWorldConfig()
        self.state = None
        self.t = 0

    def clone(self):
        return type(self)(self.config)

    def in_goal(self, state):
        return _in_box(np.asarray(state), self.config.goal_low, self.config.goal_size)

    def in_start(self, state):
        return _in_box(np.asarray(state), self.config.start_low, self.config.start_size)

    def sample_start(self, rng):
        return np.asarray(self.config.start_low) + self.config.start_size * rng.random(2)

    def reset(self, rng):
        self.state = self.sample_start(rng)
        self.t = 0
        return self.state.copy()

    def move(self, state, action):
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.action_dim,):
            raise StructuralError(f"action shape {action.shape}, expected ({self.action_dim},)")
        if not np.all(np.isfinite(action)):
            raise NumericalError("non-finite action")
        norm = np.linalg.norm(action)
        if norm < _ZERO_ACTION:
            return np.array(state, dtype=np.float64)
        return np.clip(state + self.config.step_length * action / norm, 0.0, 1.0)

    def transition(self, state, action):
        """Time-free dynamics: ``(next_state, reward, reached_goal)``."""
        nxt = self.move(state, action)
        reached = self.in_goal(nxt)
        return nxt, float(reached), reached

    def step(self, action):
        if self.state is None:
            raise StructuralError("step() before reset()")
        nxt, reward, reached = self.transition(self.state, action)
        self.state = nxt
        self.t += 1
        done = reached or self.t >= self.config.max_steps
        return nxt.copy(), reward, done


class PlayGridWorld(GridWorld):
    """Several goal squares; ``task`` selects which one pays reward (None = play, no reward)."""

    name = "play_gridworld"

    def __init__(self, config: PlayGridWorldConfig | None = None, task=None):
        self.config = config or PlayGridWorldConfig()
        if len(self.config.goals) < 2:
            raise InputError("play gridworld needs at least two goals")
        if task is not None and not 0 <= task < len(self.config.goals):
            raise InputError(f"task {task} out of range")
        self.task = task
        self.state = None
        self.t = 0

    @property
    def n_tasks(self):
        return len(self.config.goals)

    def clone(self):
        return type(self)(self.config, self.task)

    def with_task(self, task):
        return type(self)(self.config, task)

    def in_goal(self, state, task=None):
        task = self.task if task is None else task
        if task is None:
            return False
        return _in_box(np.asarray(state), self.config.goals[task], self.config.goal_size)

    def goal_center(self, task):
        return np.asarray(self.config.goals[task]) + 0.5 * self.config.goal_size


# -- demonstrators ------------------------------------------------------------

RIGHT = np.array([1.0, 0.0])
UP = np.array([0.0, 1.0])
DIAGONAL = np.array([1.0, 1.0]) / np.sqrt(2.0)


class GridDemonstrator:
    """Right or up (coin flip each step) near the start, diagonal in the
    interior, then along the top or right edge into the goal."""

    def __init__(self, config: GridWorldConfig | None = None):
        self.config = config or GridWorldConfig()

    def reset(self, rng):
        pass

    def action(self, state, rng):
        x, y = state
        c = self.config
        if x < c.bottom_left and y < c.bottom_left:
            return RIGHT.copy() if rng.random() < 0.5 else UP.copy()
        edge = 1.0 - c.step_length
        if x > edge:
            return UP.copy()
        if y > edge:
            return RIGHT.copy()
        return DIAGONAL.copy()


class PlayDemonstrator:
    """Wanders between goal squares with no task intent.

    Each leg picks a random goal other than the current one and a random
    style: straight at it, or axis-aligned (x first or y first).
    """

    STYLES = ("direct", "x_first", "y_first")

    def __init__(self, env: PlayGridWorld):
        self.env = env
        self.target = None
        self.style = None

    def reset(self, rng):
        self._new_leg(rng, exclude=None)

    def _new_leg(self, rng, exclude):
        options = [g for g in range(self.env.n_tasks) if g != exclude]
        self.target = options[rng.integers(len(options))]
        self.style = self.STYLES[rng.integers(len(self.STYLES))]

    def action(self, state, rng):
        if self.env.in_goal(state, self.target):
            self._new_leg(rng, exclude=self.target)
        delta = self.env.goal_center(self.target) - state
        tol = 0.5 * self.env.config.step_length
        if self.style == "direct":
            return delta / max(np.linalg.norm(delta), 1e-12)
        order = (0, 1) if self.style == "x_first" else (1, 0)
        for axis in order:
            if abs(delta[axis]) > tol:
                out = np.zeros(2)
                out[axis] = np.sign(delta[axis])
                return out
        return delta / max(np.linalg.norm(delta), 1e-12)


# -- demonstration datasets ---------------------------------------------------


@dataclass
class Episode:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray  # NaN where no reward was recorded
    dones: np.ndarray

    def __len__(self):
        return self.states.shape[0]


@dataclass
class DemoDataset:
    episodes: list
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return sum(len(ep) for ep in self.episodes)

    def arrays(self):
        """Concatenated ``(states, actions)`` over all episodes."""
        if not self.episodes:
            return np.zeros((0, 0)), np.zeros((0, 0))
        return (
            np.concatenate([ep.states for ep in self.episodes]),
            np.concatenate([ep.actions for ep in self.episodes]),
        )

    def all_states(self):
        return self.arrays()[0]

    def to_text(self):
        header = {"format": DEMO_FORMAT, "version": DEMO_VERSION, "metadata": self.metadata}
        lines = [json.dumps(header, sort_keys=True)]
        for eid, ep in enumerate(self.episodes):
            for t in range(len(ep)):
                r = ep.rewards[t]
                record = {
                    "episode_id": eid,
                    "t": t,
                    "state": ep.states[t].tolist(),
                    "action": ep.actions[t].tolist(),
                    "reward": None if np.isnan(r) else float(r),
                    "done": int(ep.dones[t]),
                }
                lines.append(json.dumps(record))
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        if not lines:
            raise InputError("empty demo file")
        header = json.loads(lines[0])
        if header.get("format") != DEMO_FORMAT or header.get("version") != DEMO_VERSION:
            raise InputError("not a version-1 demo file")
        grouped = {}
        for line in lines[1:]:
            if line.strip():
                rec = json.loads(line)
                grouped.setdefault(rec["episode_id"], []).append(rec)
        episodes = []
        for eid in sorted(grouped):
            recs = sorted(grouped[eid], key=lambda r: r["t"])
            episodes.append(Episode(
                states=np.array([r["state"] for r in recs], dtype=np.float64),
                actions=np.array([r["action"] for r in recs], dtype=np.float64),
                rewards=np.array([np.nan if r["reward"] is None else r["reward"] for r in recs],
                                 dtype=np.float64),
                dones=np.array([bool(r["done"]) for r in recs]),
            ))
        return cls(episodes, header.get("metadata", {}))

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())


def _env_metadata(env, seed, kind):
    return {
        "env": env.name,
        "env_config": asdict(env.config),
        "seed": seed,
        "generator": kind,
        "generator_version": GENERATOR_VERSION,
    }


def generate_demos(env: GridWorld, policy, n_episodes, seed):
    """Roll out ``policy`` until the goal; every episode must succeed."""
    if n_episodes < 1:
        raise InputError("n_episodes must be >= 1")
    rng = np.random.default_rng(seed)
    env = env.clone()
    episodes = []
    for i in range(n_episodes):
        state = env.reset(rng)
        policy.reset(rng)
        states, actions, rewards, dones = [], [], [], []
        done, reward = False, 0.0
        while not done:
            action = policy.action(state, rng)
            states.append(state)
            actions.append(action)
            state, reward, done = env.step(action)
            rewards.append(reward)
            dones.append(done)
        if reward != 1.0:
            raise RuntimeError(f"demonstrator failed to reach the goal in episode {i}")
        episodes.append(Episode(np.array(states), np.array(actions),
                                np.array(rewards), np.array(dones)))
    return DemoDataset(episodes, _env_metadata(env, seed, type(policy).__name__))


def generate_play_demos(env: PlayGridWorld, n_episodes, seed, episode_length=None):
    """Fixed-length play episodes without reward labels."""
    if n_episodes < 1:
        raise InputError("n_episodes must be >= 1")
    length = episode_length or env.config.play_episode_length
    rng = np.random.default_rng(seed)
    env = env.with_task(None)
    policy = PlayDemonstrator(env)
    episodes = []
    for _ in range(n_episodes):
        state = env.reset(rng)
        policy.reset(rng)
        states, actions = [], []
        for _ in range(length):
            action = policy.action(state, rng)
            states.append(state)
            actions.append(action)
            state = env.move(state, action)
        dones = np.zeros(length, dtype=bool)
        dones[-1] = True
        episodes.append(Episode(np.array(states), np.array(actions),
                                np.full(length, np.nan), dones))
    return DemoDataset(episodes, _env_metadata(env, seed, "PlayDemonstrator"))


# -- discretisation -----------------------------------------------------------


class DiscretizedEnv:
    """``K``-action view of a continuous env: index ``k`` plays candidate ``k``."""

    def __init__(self, inner: GridWorld, generator):
        if generator.action_dim != inner.action_dim:
            raise StructuralError(
                f"generator action dim {generator.action_dim} != env action dim {inner.action_dim}"
            )
        self.inner = inner
        self.generator = generator

    @property
    def K(self):
        return self.generator.K

    @property
    def state(self):
        return self.inner.state

    def clone(self):
        return DiscretizedEnv(self.inner.clone(), self.generator)

    def _candidate(self, state, index):
        if not 0 <= index < self.K:
            raise StructuralError(f"action index {index} outside [0, {self.K})")
        return self.generator.actions(state)[index]

    def reset(self, rng):
        return self.inner.reset(rng)

    def transition(self, state, index):
        return self.inner.transition(state, self._candidate(state, index))

    def step(self, index):
        return self.inner.step(self._candidate(self.inner.state, index))


def discretized_step(denv: DiscretizedEnv, state, action_index):
    return denv.transition(np.asarray(state, dtype=np.float64), action_index)


def bang_bang_candidates(bins_per_dim, action_dim, low=-1.0, high=1.0):
    """Cartesian grid of ``bins_per_dim`` evenly spaced values per action dimension."""
    if bins_per_dim < 2:
        raise InputError("bang-bang needs at least 2 bins per dimension")
    size = bins_per_dim**action_dim
    if size > MAX_BANG_BANG_ACTIONS:
        raise InputError(f"{bins_per_dim}^{action_dim} = {size} actions exceeds the cap")
    grid = np.linspace(low, high, bins_per_dim)
    table = np.array(list(itertools.product(grid, repeat=action_dim)))
    return FixedCandidates(table, "bangbang")
