"""Learning from demonstrations without reward: BC and MDN baselines, the
adversarial loop over a discretised action space, and per-task RL on top of a
discretisation learned from play data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from aquadem.errors import InputError, NumericalError, StructuralError
from aquadem.metrics import evaluate, sinkhorn_distance, subsample
from aquadem.nn import Adam, DropoutConfig, Mlp, NO_DROPOUT
from aquadem.quantizer import TrainConfig, mdn_sample, train_quantizer
from aquadem.rl import GreedyPolicy, MdqnConfig, TraceRow, run_dqn
from aquadem.envs import DiscretizedEnv

P_CLIP = 1e-6
REWARD_BALANCES = (0.0, 0.5, 1.0)


@dataclass(frozen=True)
class ObsNormalizer:
    """Per-dimension standardisation fitted once on demonstration states."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, states, min_std=1e-6):
        states = np.asarray(states, dtype=np.float64)
        return cls(states.mean(axis=0).copy(), np.maximum(states.std(axis=0), min_std).copy())

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, states):
        return (np.asarray(states, dtype=np.float64) - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["mean"]), np.array(doc["std"]))


# -- behavioural cloning ------------------------------------------------------


@dataclass
class BcConfig:
    learning_rate: float = 3e-4
    hidden: tuple = (256,)
    activation: str = "tanh"
    obs_normalization: bool = True
    weight_decay: float = 0.0
    dropout: float = 0.0
    batch_size: int = 64
    gradient_steps: int = 5_000
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.batch_size < 1 or self.gradient_steps < 0:
            raise InputError("batch_size must be >= 1 and gradient_steps >= 0")


class BcPolicy:
    """Deterministic regressor; the tanh output is rescaled to the action box."""

    def __init__(self, net: Mlp, normalizer: ObsNormalizer, low, high):
        self.net, self.normalizer = net, normalizer
        self.low, self.high = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)

    def _scale(self, t):
        return self.low + (t + 1.0) * 0.5 * (self.high - self.low)

    def forward(self, states, train=False, rng=None, dropout=NO_DROPOUT):
        t, cache = self.net.forward(self.normalizer(states), train, rng, dropout)
        return self._scale(t), cache

    def __call__(self, state):
        state = np.asarray(state, dtype=np.float64)
        out = self.forward(np.atleast_2d(state))[0]
        return out[0] if state.ndim == 1 else out

    def to_dict(self):
        return {"format": "aquadem-bc", "version": 1, "net": self.net.to_dict(),
                "normalizer": self.normalizer.to_dict(),
                "low": self.low.tolist(), "high": self.high.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(Mlp.from_dict(doc["net"]), ObsNormalizer.from_dict(doc["normalizer"]),
                   doc["low"], doc["high"])


def bc_loss(model, state, action):
    """Squared reconstruction error ``||model(state) - action||^2`` (mean over a batch)."""
    pred = np.asarray(model(state), dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if pred.shape != action.shape:
        raise StructuralError(f"prediction shape {pred.shape} vs action shape {action.shape}")
    sq = ((pred - action) ** 2).sum(axis=-1)
    return float(np.mean(sq))


def bc_loss_and_grad(policy: BcPolicy, states, actions, train=False, rng=None, dropout=NO_DROPOUT):
    pred, cache = policy.forward(states, train, rng, dropout)
    diff = pred - actions
    n = diff.shape[0]
    loss = float((diff * diff).sum() / n)
    grad_t = 2.0 * diff / n * 0.5 * (policy.high - policy.low)
    grads, _ = policy.net.backward(cache, grad_t)
    return loss, grads


def train_bc(demos, config: BcConfig, action_bounds=None):
    states, actions = demos.arrays()
    low, high = (-np.ones(actions.shape[1]), np.ones(actions.shape[1])) if action_bounds is None \
        else action_bounds
    dims = [states.shape[1], *config.hidden, actions.shape[1]]
    net = Mlp(dims, [config.activation] * len(config.hidden) + ["tanh"],
              rng=np.random.default_rng(config.seed))
    norm = ObsNormalizer.fit(states) if config.obs_normalization else ObsNormalizer.identity(states.shape[1])
    policy = BcPolicy(net, norm, low, high)
    opt = Adam([net], config.learning_rate)
    rng = np.random.default_rng([config.seed, 7])
    dropout = DropoutConfig(config.dropout, config.dropout)
    trace = []
    for step in range(config.gradient_steps):
        idx = rng.integers(0, states.shape[0], size=config.batch_size)
        loss, grads = bc_loss_and_grad(policy, states[idx], actions[idx], True, rng, dropout)
        if config.weight_decay:
            grads = [g + config.weight_decay * p for g, p in zip(grads, net.params())]
        if not math.isfinite(loss):
            raise NumericalError(f"BC loss diverged at step {step}", step=step)
        opt.step([grads])
        trace.append(loss)
    return policy, trace


class MdnPolicy:
    """Samples a candidate according to the mixture weights at each call."""

    def __init__(self, model, seed=0):
        self.model = model
        self.rng = np.random.default_rng(seed)

    def __call__(self, state):
        return mdn_sample(self.model, state, self.rng)


def train_mdn(demos, config: TrainConfig, action_bounds=None):
    return train_quantizer(demos, config, action_bounds, mdn=True)


# -- discriminator ------------------------------------------------------------


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class Discriminator:
    """Logit of "this sample is expert". Input is the state, optionally with a
    one-hot action index appended."""

    def __init__(self, state_dim, normalizer: ObsNormalizer, hidden=(64,), activation="relu",
                 regularization="dropout", input_dropout=0.5, hidden_dropout=0.5,
                 weight_decay=10.0, n_actions=None, seed=0):
        if regularization not in ("none", "dropout", "weight_decay"):
            raise InputError(f"unknown regularization {regularization!r}")
        self.state_dim, self.n_actions = state_dim, n_actions
        in_dim = state_dim + (n_actions or 0)
        dims = [in_dim, *hidden, 1]
        self.net = Mlp(dims, [activation] * len(hidden) + ["linear"],
                       rng=np.random.default_rng([seed, 3]))
        self.normalizer = normalizer
        self.regularization = regularization
        self.dropout = DropoutConfig(input_dropout, hidden_dropout) \
            if regularization == "dropout" else NO_DROPOUT
        self.weight_decay = weight_decay if regularization == "weight_decay" else 0.0

    def features(self, states, action_indices=None):
        x = self.normalizer(np.atleast_2d(states))
        if self.n_actions:
            if action_indices is None:
                raise StructuralError("state-action discriminator needs action indices")
            x = np.concatenate([x, np.eye(self.n_actions)[np.asarray(action_indices)]], axis=1)
        return x

    def logits(self, states, action_indices=None):
        return self.net(self.features(states, action_indices))[:, 0]

    def expert_prob(self, states, action_indices=None):
        return _sigmoid(self.logits(states, action_indices))

    def agent_prob(self, states, action_indices=None):
        return _sigmoid(-self.logits(states, action_indices))


def discriminator_loss(disc: Discriminator, demo_batch, agent_batch, rng=None):
    """Binary cross-entropy, demos labelled 1, agent samples 0, averaged over
    both batches; plus ``0.5 * weight_decay * sum ||W||^2`` when configured.

    Batches are state arrays, or ``(states, action_indices)`` pairs for a
    state-action discriminator. Dropout is applied only when ``rng`` is given.
    """
    def unpack(batch):
        return batch if isinstance(batch, tuple) else (batch, None)

    ds, da = unpack(demo_batch)
    gs, ga = unpack(agent_batch)
    n_demo, n_agent = len(ds), len(gs)
    if n_demo == 0 or n_agent == 0:
        raise InputError("both batches must be nonempty")
    x = np.concatenate([disc.features(ds, da), disc.features(gs, ga)])
    labels = np.concatenate([np.ones(n_demo), np.zeros(n_agent)])
    train = rng is not None
    logit, cache = disc.net.forward(x, train, rng, disc.dropout if train else NO_DROPOUT)
    logit = logit[:, 0]
    n = labels.shape[0]
    # softplus(-l) for label 1, softplus(l) for label 0
    signed = np.where(labels == 1, -logit, logit)
    loss = float(_softplus(signed).mean())
    grad_logit = (_sigmoid(logit) - labels) / n
    grads, _ = disc.net.backward(cache, grad_logit[:, None])
    if disc.weight_decay:
        weight_ids = {id(w) for w in disc.net.weights}
        loss += 0.5 * disc.weight_decay * sum(float((w * w).sum()) for w in disc.net.weights)
        grads = [g + disc.weight_decay * p if id(p) in weight_ids else g
                 for g, p in zip(grads, disc.net.params())]
    return loss, grads


def gail_reward(p, balance, symmetric=False):
    """Reward from ``p``, the probability of the agent class.

    balance 0 gives ``-log p``, 1 gives ``log(1 - p)`` and 0.5 gives
    ``-0.5 log p + log(1 - p)`` (or ``-0.5 (log p - log(1 - p))`` with
    ``symmetric``). ``p`` is clipped to ``[1e-6, 1 - 1e-6]`` first.
    """
    if balance not in REWARD_BALANCES:
        raise InputError(f"reward balance must be one of {REWARD_BALANCES}")
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLIP, 1.0 - P_CLIP)
    if balance == 0.0:
        r = -np.log(p)
    elif balance == 1.0:
        r = np.log1p(-p)
    elif symmetric:
        r = -0.5 * (np.log(p) - np.log1p(-p))
    else:
        r = -0.5 * np.log(p) + np.log1p(-p)
    return r if r.ndim else float(r)


# -- adversarial loop ---------------------------------------------------------


@dataclass
class GailConfig:
    reward_balance: float = 0.5
    symmetric_reward: bool = False
    # p fed to the reward is the agent-class probability; set to use the expert one
    p_is_expert: bool = False
    disc_learning_rate: float = 1e-4
    disc_hidden: tuple = (64,)
    disc_activation: str = "relu"
    disc_regularization: str = "dropout"
    disc_input_dropout: float = 0.5
    disc_hidden_dropout: float = 0.5
    disc_weight_decay: float = 10.0
    disc_obs_normalization: bool = True
    disc_updates_per_step: int = 1
    disc_batch_size: int = 64
    state_action: bool = False
    sinkhorn_epsilon: float = 1e-2
    sinkhorn_cap: int = 500
    learner: MdqnConfig = field(default_factory=lambda: MdqnConfig(
        learning_rate=1e-4, n_step=1, epsilon=0.01, demo_ratio=0.0, demo_min_reward=None,
        batch_size=64))

    def __post_init__(self):
        self.disc_hidden = tuple(self.disc_hidden)
        if isinstance(self.learner, dict):
            self.learner = MdqnConfig(**self.learner)
        if self.reward_balance not in REWARD_BALANCES:
            raise InputError(f"reward_balance must be one of {REWARD_BALANCES}")
        if self.state_action and self.learner.n_step != 1:
            raise InputError("the state-action discriminator needs n_step = 1")
        if self.disc_updates_per_step < 0:
            raise InputError("disc_updates_per_step must be >= 0")


def make_discriminator(cfg: GailConfig, demos, K, seed):
    states = demos.all_states()
    norm = ObsNormalizer.fit(states) if cfg.disc_obs_normalization \
        else ObsNormalizer.identity(states.shape[1])
    return Discriminator(states.shape[1], norm, cfg.disc_hidden, cfg.disc_activation,
                         cfg.disc_regularization, cfg.disc_input_dropout, cfg.disc_hidden_dropout,
                         cfg.disc_weight_decay, K if cfg.state_action else None, seed)


def _reward_prob(disc, cfg, states, actions=None):
    if cfg.p_is_expert:
        return disc.expert_prob(states, actions)
    return disc.agent_prob(states, actions)


def batch_rewards(disc, cfg: GailConfig, batch):
    """Rewards for sampled transitions under the current discriminator.

    Each step of an n-step window is rewarded on the state it lands in and
    the window is discounted as when it was stored.
    """
    gamma = cfg.learner.gamma
    lens = batch["window_len"]
    steps = batch["step_states"]
    n, width, dim = steps.shape
    if cfg.state_action:
        p = _reward_prob(disc, cfg, batch["next_states"], batch["actions"])
        return gail_reward(p, cfg.reward_balance, cfg.symmetric_reward)
    p = _reward_prob(disc, cfg, steps.reshape(n * width, dim))
    r = np.atleast_1d(gail_reward(p, cfg.reward_balance, cfg.symmetric_reward)).reshape(n, width)
    live = np.arange(width)[None, :] < lens[:, None]
    return (r * live * gamma ** np.arange(width)[None, :]).sum(axis=1)


def train_aquagail(denv: DiscretizedEnv, demos, cfg: GailConfig, seed, eval_seed=None):
    """Alternate discriminator updates with Munchausen DQN updates whose rewards
    come from the discriminator. The environment reward is never read."""
    disc = make_discriminator(cfg, demos, denv.K, seed)
    opt = Adam([disc.net], cfg.disc_learning_rate)
    demo_states = demos.all_states()
    demo_actions = None
    if cfg.state_action:
        from aquadem.quantizer import project_actions
        demo_actions = np.concatenate([
            project_actions(denv.generator.candidate_actions(ep.states), ep.actions)
            for ep in demos.episodes])
    eval_seed = seed + 10_000 if eval_seed is None else eval_seed
    disc_losses = []

    def on_update(step, replay, rng):
        agent = replay.agent
        for _ in range(cfg.disc_updates_per_step):
            di = rng.integers(0, demo_states.shape[0], size=cfg.disc_batch_size)
            ai = rng.integers(0, len(agent), size=cfg.disc_batch_size)
            if cfg.state_action:
                demo_b = (demo_states[di], demo_actions[di])
                agent_b = (agent.states[ai], agent.actions[ai])
            else:
                demo_b, agent_b = demo_states[di], agent.next_states[ai]
            loss, grads = discriminator_loss(disc, demo_b, agent_b, rng)
            if not math.isfinite(loss):
                raise NumericalError(f"discriminator loss diverged at step {step}", step=step)
            opt.step([grads])
            disc_losses.append(loss)

    def reward_fn(batch):
        return batch_rewards(disc, cfg, batch)

    def eval_fn(step, learner, q_loss):
        policy = GreedyPolicy(learner.qnet, denv.generator)
        res = evaluate(policy, denv.inner, cfg.learner.eval_episodes, eval_seed, read_reward=False)
        rng = np.random.default_rng([eval_seed, step])
        dist = sinkhorn_distance(subsample(res.states, cfg.sinkhorn_cap, rng),
                                 subsample(demo_states, cfg.sinkhorn_cap, rng),
                                 cfg.sinkhorn_epsilon)
        recent = disc_losses[-200:]
        return TraceRow(step, res.success_rate, None, q_loss, dist.value,
                        float(np.mean(recent)) if recent else None)

    learner, trace = run_dqn(denv, cfg.learner, seed, None, reward_fn=reward_fn,
                             on_update=on_update, eval_fn=eval_fn)
    policy = GreedyPolicy(learner.qnet, denv.generator)
    policy.discriminator = disc
    return policy, trace


GAIL_TRACE_COLUMNS = ("step", "success_rate", "sinkhorn_distance", "disc_loss")


# -- play data ----------------------------------------------------------------


@dataclass
class PlayConfig:
    quantizer: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=1e-3, input_dropout=0.1, hidden_dropout=0.1, temperature=1e-4, K=30,
        batch_size=64, gradient_steps=5_000))
    learner: MdqnConfig = field(default_factory=lambda: MdqnConfig(
        demo_ratio=0.0, demo_min_reward=None, batch_size=64))

    def __post_init__(self):
        if isinstance(self.quantizer, dict):
            self.quantizer = TrainConfig(**self.quantizer)
        if isinstance(self.learner, dict):
            self.learner = MdqnConfig(**self.learner)


def train_aquaplay(play_env, play_demos, task_id, cfg: PlayConfig, seed, generator=None):
    """One task: discretisation from task-agnostic play data, then RL on that
    task's sparse reward. Play data never enters the replay buffer."""
    if generator is None:
        qcfg = replace(cfg.quantizer, seed=seed)
        bounds = (play_env.action_low, play_env.action_high)
        generator = train_quantizer(play_demos, qcfg, action_bounds=bounds).model
    learner_cfg = replace(cfg.learner, demo_ratio=0.0)
    env = play_env.with_task(task_id)
    denv = DiscretizedEnv(env, generator)
    eval_seed = seed + 10_000

    def eval_fn(step, learner, q_loss):
        res = evaluate(GreedyPolicy(learner.qnet, generator), env, learner_cfg.eval_episodes, eval_seed)
        return TraceRow(step, res.success_rate, res.mean_return, q_loss)

    learner, trace = run_dqn(denv, learner_cfg, seed, None, eval_fn=eval_fn)
    return GreedyPolicy(learner.qnet, generator), trace
