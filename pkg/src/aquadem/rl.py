"""Value-based RL over a discretised action space.

Munchausen DQN targets, n-step transitions, epsilon-greedy acting and a
replay that mixes agent and demonstration transitions at a fixed ratio.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from aquadem.errors import InputError, NumericalError, StructuralError
from aquadem.metrics import evaluate
from aquadem.nn import Adam, Mlp
from aquadem.quantizer import project_actions


@dataclass
class MdqnConfig:
    gamma: float = 0.99
    tau: float = 0.03
    alpha: float = 0.9
    l0: float = -1.0
    epsilon: float = 0.1
    n_step: int = 3
    learning_rate: float = 1e-4
    batch_size: int = 256
    demo_ratio: float = 0.25
    demo_min_reward: float | None = 0.01
    hidden: tuple = (128, 64)
    hidden_activations: tuple = ("layer_norm_tanh", "elu")
    target_update_period: int = 200
    buffer_capacity: int = 100_000
    min_replay: int = 500
    total_steps: int = 20_000
    eval_every: int = 2_000
    eval_episodes: int = 20
    double_dqn: bool = False

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.hidden_activations = tuple(self.hidden_activations)
        if not 0.0 < self.gamma < 1.0:
            raise InputError("gamma must be in (0, 1)")
        if not self.tau > 0:
            raise InputError("tau must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError("alpha must be in [0, 1]")
        if self.l0 > 0:
            raise InputError("l0 must be <= 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise InputError("epsilon must be in [0, 1]")
        if self.n_step < 1:
            raise InputError("n_step must be >= 1")
        if not 0.0 <= self.demo_ratio <= 1.0:
            raise InputError("demo_ratio must be in [0, 1]")
        if len(self.hidden) != len(self.hidden_activations):
            raise InputError("one activation per hidden layer")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")


# -- networks -----------------------------------------------------------------


class QNetwork:
    """Online and target MLPs mapping a state to ``K`` action values."""

    def __init__(self, state_dim, K, hidden=(128, 64),
                 hidden_activations=("layer_norm_tanh", "elu"), seed=0):
        dims = [state_dim, *hidden, K]
        acts = [*hidden_activations, "linear"]
        self.net = Mlp(dims, acts, rng=np.random.default_rng(seed))
        self.target = self.net.copy()
        self.K = K

    def sync(self):
        self.target.load_params_from(self.net)

    def q(self, states):
        return self.net(states)

    def to_dict(self):
        return {"online": self.net.to_dict(), "K": self.K}

    @classmethod
    def from_dict(cls, doc):
        obj = object.__new__(cls)
        obj.net = Mlp.from_dict(doc["online"])
        obj.target = obj.net.copy()
        obj.K = doc["K"]
        if obj.net.out_dim != obj.K:
            raise StructuralError("Q-network output size does not match K")
        return obj


class GreedyPolicy:
    """Continuous-action policy: argmax over Q, then look up that candidate."""

    def __init__(self, qnet: QNetwork, generator):
        if qnet.K != generator.K:
            raise StructuralError(f"Q-network has {qnet.K} actions, discretiser has {generator.K}")
        self.qnet = qnet
        self.generator = generator

    def index(self, state):
        return int(np.argmax(self.qnet.q(state)))

    def __call__(self, state):
        return self.generator.actions(state)[self.index(state)]


# -- targets and losses -------------------------------------------------------


def _scaled_log_softmax(q, tau):
    """``tau * log softmax(q / tau)`` along the last axis, stable for tiny tau."""
    shifted = q - q.max(axis=-1, keepdims=True)
    return shifted - tau * np.log(np.exp(shifted / tau).sum(axis=-1, keepdims=True))


def mdqn_target(batch, online_q, target_q, cfg: MdqnConfig):
    """Munchausen targets.

    ``r + alpha * tau * clip(log pi(a|s), l0, 0)
    + discount * (1 - done) * sum_a' pi(a'|s') (q(s', a') - tau log pi(a'|s'))``
    with ``pi = softmax(q_target / tau)``. ``online_q``/``target_q`` are
    callables from states to (n, K) values.
    """
    states, actions = batch["states"], batch["actions"]
    n = len(actions)
    both = target_q(np.concatenate([states, batch["next_states"]]))
    q_s, q_next = both[:n], both[n:]
    if not (np.all(np.isfinite(q_s)) and np.all(np.isfinite(q_next))):
        raise NumericalError("non-finite Q-values in target computation")
    tau = cfg.tau
    log_pi_a = _scaled_log_softmax(q_s, tau)[np.arange(n), actions] / tau
    bonus = cfg.alpha * tau * np.clip(log_pi_a, cfg.l0, 0.0)
    policy_q = online_q(batch["next_states"]) if cfg.double_dqn else q_next
    tau_log_pi_next = _scaled_log_softmax(policy_q, tau)
    pi_next = np.exp(tau_log_pi_next / tau)
    soft_value = (pi_next * (q_next - tau_log_pi_next)).sum(axis=1)
    bootstrap = batch["discounts"] * (1.0 - batch["dones"]) * soft_value
    return batch["rewards"] + bonus + bootstrap


def td_loss(batch, qnet_online: Mlp, targets):
    """Mean squared TD error and gradients for the online network only."""
    q, cache = qnet_online.forward(batch["states"])
    n = q.shape[0]
    rows = np.arange(n)
    err = q[rows, batch["actions"]] - targets
    loss = float(np.mean(err * err))
    grad_q = np.zeros_like(q)
    grad_q[rows, batch["actions"]] = 2.0 * err / n
    grads, _ = qnet_online.backward(cache, grad_q)
    return loss, grads


def act_epsilon_greedy(q_values, epsilon, rng):
    if not 0.0 <= epsilon <= 1.0:
        raise InputError("epsilon must be in [0, 1]")
    q_values = np.asarray(q_values)
    if rng.random() < epsilon:
        return int(rng.integers(q_values.shape[0]))
    return int(np.argmax(q_values))


# -- transitions and replay ---------------------------------------------------


@dataclass
class Transition:
    state: np.ndarray
    action_index: int
    n_step_reward: float
    discount_to_bootstrap: float
    next_state: np.ndarray
    done: bool
    is_demo: bool = False
    step_rewards: tuple | None = None
    gamma: float | None = None
    # next-state of every step in the window; lets imitation recompute rewards
    step_states: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.step_rewards is not None and self.gamma is not None:
            expected = sum(self.gamma**i * r for i, r in enumerate(self.step_rewards))
            if not math.isclose(expected, self.n_step_reward, rel_tol=1e-12, abs_tol=1e-12):
                raise StructuralError("n-step reward inconsistent with per-step rewards")


def accumulate_n_step(window, gamma, n, done):
    """Fold a window of ``(state, action, reward, next_state)`` steps into one transition.

    ``window`` may be shorter than ``n`` only at the end of an episode;
    ``done`` marks a terminal (non-bootstrapped) final step.
    """
    m = len(window)
    if not 1 <= m <= n:
        raise StructuralError(f"window length {m} not in [1, {n}]")
    rewards = tuple(float(step[2]) for step in window)
    total = sum(gamma**i * r for i, r in enumerate(rewards))
    return Transition(
        state=np.asarray(window[0][0]),
        action_index=int(window[0][1]),
        n_step_reward=total,
        discount_to_bootstrap=gamma**m,
        next_state=np.asarray(window[-1][3]),
        done=bool(done),
        step_rewards=rewards,
        gamma=gamma,
        step_states=np.array([step[3] for step in window]),
    )


class NStepAccumulator:
    """Streams single steps and emits n-step transitions as they complete."""

    def __init__(self, gamma, n):
        self.gamma, self.n = gamma, n
        self.window = deque()

    def push(self, state, action, reward, next_state, terminal, episode_end):
        """Returns the transitions completed by this step."""
        self.window.append((state, action, reward, next_state))
        out = []
        if len(self.window) == self.n:
            out.append(accumulate_n_step(list(self.window), self.gamma, self.n, terminal))
            self.window.popleft()
        if episode_end:
            while self.window:
                out.append(accumulate_n_step(list(self.window), self.gamma, self.n, terminal))
                self.window.popleft()
        return out


class ReplayBuffer:
    """Array-backed FIFO of transitions (oldest evicted first)."""

    def __init__(self, capacity, state_dim, n_step=1):
        self.capacity, self.size, self._next = capacity, 0, 0
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.discounts = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.is_demo = np.zeros(capacity, dtype=bool)
        self.step_states = np.zeros((capacity, n_step, state_dim))
        self.window_len = np.zeros(capacity, dtype=np.int64)

    def __len__(self):
        return self.size

    def add(self, tr: Transition):
        i = self._next
        self.states[i], self.next_states[i] = tr.state, tr.next_state
        self.actions[i], self.rewards[i] = tr.action_index, tr.n_step_reward
        self.discounts[i], self.dones[i] = tr.discount_to_bootstrap, float(tr.done)
        self.is_demo[i] = tr.is_demo
        if tr.step_states is not None:
            m = tr.step_states.shape[0]
            self.step_states[i, :m] = tr.step_states
            self.window_len[i] = m
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def take(self, idx):
        return {
            "states": self.states[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "discounts": self.discounts[idx],
            "next_states": self.next_states[idx],
            "dones": self.dones[idx],
            "is_demo": self.is_demo[idx],
            "step_states": self.step_states[idx],
            "window_len": self.window_len[idx],
        }


class DualReplay:
    """Agent FIFO plus a fixed demonstration buffer, sampled at a fixed ratio.

    Every batch holds exactly ``round(ratio * batch_size)`` demo transitions
    (first rows) and the rest from the agent buffer.
    """

    def __init__(self, agent: ReplayBuffer, demo: ReplayBuffer | None, ratio):
        if not 0.0 <= ratio <= 1.0:
            raise InputError("ratio must be in [0, 1]")
        self.agent, self.demo, self.ratio = agent, demo, ratio

    def n_demo(self, batch_size):
        return int(math.floor(self.ratio * batch_size + 0.5))

    def sample(self, batch_size, rng):
        k = self.n_demo(batch_size)
        if k > 0 and (self.demo is None or len(self.demo) == 0):
            raise StructuralError("demo ratio > 0 but no demonstrations loaded")
        demo_idx = rng.integers(0, len(self.demo), size=k) if k else np.zeros(0, dtype=np.int64)
        agent_idx = rng.integers(0, len(self.agent), size=batch_size - k)
        parts = []
        if k:
            parts.append(self.demo.take(demo_idx))
        if batch_size - k:
            parts.append(self.agent.take(agent_idx))
        return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


def ingest_demos(demos, generator, cfg: MdqnConfig, env=None):
    """Discretise demonstrations into a fixed replay buffer.

    Each demo action is replaced by the index of its nearest candidate. When
    ``cfg.demo_min_reward`` is set, stored per-step rewards are floored at it.
    A final step not marked terminal gets its next state from ``env.move``.
    """
    n_total = len(demos)
    buf = ReplayBuffer(max(n_total, 1), generator_state_dim(demos), cfg.n_step)
    for ep in demos.episodes:
        cands = generator.candidate_actions(ep.states)
        if cands.shape[-1] != ep.actions.shape[1]:
            raise StructuralError("demo actions and candidates differ in dimension")
        indices = project_actions(cands, ep.actions)
        rewards = np.nan_to_num(ep.rewards, nan=0.0)
        if cfg.demo_min_reward is not None:
            rewards = np.maximum(rewards, cfg.demo_min_reward)
        T = len(ep)
        terminal = bool(ep.dones[-1])
        if terminal:
            last_next = ep.states[-1]
        elif env is not None:
            last_next = env.move(ep.states[-1], ep.actions[-1])
        else:
            raise StructuralError("non-terminal demo episode needs an env to rebuild its last next-state")
        next_states = np.concatenate([ep.states[1:], last_next[None]])
        acc = NStepAccumulator(cfg.gamma, cfg.n_step)
        for t in range(T):
            for tr in acc.push(ep.states[t], indices[t], rewards[t], next_states[t],
                               terminal and t == T - 1, t == T - 1):
                tr.is_demo = True
                buf.add(tr)
    return buf


def generator_state_dim(demos):
    return demos.episodes[0].states.shape[1]


# -- training loop ------------------------------------------------------------


@dataclass
class TraceRow:
    step: int
    success_rate: float
    mean_return: float | None
    q_loss: float | None
    sinkhorn_distance: float | None = None
    disc_loss: float | None = None


class DqnLearner:
    """Online/target Q-networks, Adam and the Munchausen update."""

    def __init__(self, state_dim, K, cfg: MdqnConfig, seed):
        self.cfg = cfg
        self.qnet = QNetwork(state_dim, K, cfg.hidden, cfg.hidden_activations, seed=seed)
        self.opt = Adam([self.qnet.net], cfg.learning_rate)
        self.updates = 0

    def update(self, batch):
        targets = mdqn_target(batch, self.qnet.net, self.qnet.target, self.cfg)
        loss, grads = td_loss(batch, self.qnet.net, targets)
        if not math.isfinite(loss):
            raise NumericalError("non-finite TD loss")
        self.opt.step([grads])
        self.updates += 1
        if self.updates % self.cfg.target_update_period == 0:
            self.qnet.sync()
        return loss


def _terminal(denv):
    inner = denv.inner
    return inner.in_goal(inner.state)


def run_dqn(denv, cfg: MdqnConfig, seed, demo_buffer=None, reward_fn=None,
            on_update=None, eval_fn=None):
    """Interact, store, sample, update. Shared by AQuaDQN, AQuaGAIL and AQuaPlay.

    ``reward_fn(batch) -> rewards`` replaces stored rewards at sampling time
    (imitation). ``on_update(step, replay, rng)`` runs before each learner
    update. ``eval_fn(step, learner, recent_loss) -> TraceRow``.
    """
    rng = np.random.default_rng([seed, 11])
    state_dim = denv.inner.state_dim
    learner = DqnLearner(state_dim, denv.K, cfg, seed)
    agent_buf = ReplayBuffer(cfg.buffer_capacity, state_dim, cfg.n_step)
    replay = DualReplay(agent_buf, demo_buffer, cfg.demo_ratio if demo_buffer is not None else 0.0)
    acc = NStepAccumulator(cfg.gamma, cfg.n_step)
    trace, losses = [], deque(maxlen=200)
    state = denv.reset(rng)
    for step in range(1, cfg.total_steps + 1):
        a = act_epsilon_greedy(learner.qnet.q(state), cfg.epsilon, rng)
        nxt, reward, done = denv.step(a)
        if reward_fn is not None:
            reward = 0.0  # environment reward is never consumed in imitation mode
        terminal = done and _terminal(denv)
        for tr in acc.push(state, a, reward, nxt, terminal, done):
            agent_buf.add(tr)
        state = denv.reset(rng) if done else nxt
        if len(agent_buf) >= max(cfg.min_replay, 1):
            if on_update is not None:
                on_update(step, replay, rng)
            batch = replay.sample(cfg.batch_size, rng)
            if reward_fn is not None:
                batch["rewards"] = reward_fn(batch)
            try:
                losses.append(learner.update(batch))
            except NumericalError as exc:
                raise NumericalError(f"{exc} at step {step}", step=step) from exc
        if eval_fn is not None and step % cfg.eval_every == 0:
            trace.append(eval_fn(step, learner, float(np.mean(losses)) if losses else None))
    return learner, trace


def train_aquadqn(denv, demos, cfg: MdqnConfig, seed, eval_seed=None):
    """Munchausen DQN on the discretised env with demonstrations mixed into replay."""
    demo_buffer = None
    if demos is not None and cfg.demo_ratio > 0:
        demo_buffer = ingest_demos(demos, denv.generator, cfg, env=denv.inner)
    eval_seed = seed + 10_000 if eval_seed is None else eval_seed

    def eval_fn(step, learner, loss):
        policy = GreedyPolicy(learner.qnet, denv.generator)
        res = evaluate(policy, denv.inner, cfg.eval_episodes, eval_seed)
        return TraceRow(step, res.success_rate, res.mean_return, loss)

    learner, trace = run_dqn(denv, cfg, seed, demo_buffer, eval_fn=eval_fn)
    return GreedyPolicy(learner.qnet, denv.generator), trace


TRACE_COLUMNS = ("step", "success_rate", "mean_return", "q_loss")


def trace_csv(trace, columns=TRACE_COLUMNS):
    lines = [",".join(columns)]
    for row in trace:
        vals = []
        for c in columns:
            v = getattr(row, c)
            vals.append("" if v is None else repr(v))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
