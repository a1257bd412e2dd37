"""State-conditioned action candidates learned from demonstrations.

A :class:`QuantizerModel` maps a state to ``K`` candidate actions. It is
trained by minimising the soft minimum over candidates of the squared
reconstruction error against the demonstrated action. With ``K = 1`` this is
plain behavioural cloning; as the temperature goes to zero only the closest
candidate is pulled toward each demonstrated action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from aquadem.errors import (
    DegenerateClusterError,
    DomainError,
    InputError,
    NumericalError,
    StructuralError,
)
from aquadem.nn import Adam, DropoutConfig, Mlp, NO_DROPOUT

QUANTIZER_FORMAT = "aquadem-quantizer"
QUANTIZER_VERSION = 1
TRAITS = ("aquadem", "mdn", "kmeans", "random", "bangbang")


# -- losses -------------------------------------------------------------------


def _check_temperature(temperature):
    if not temperature > 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")


def squared_distances(candidates, actions):
    """``x[..., k] = ||candidates[..., k, :] - actions[..., :]||^2``."""
    candidates = np.asarray(candidates, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if candidates.shape[-1] != actions.shape[-1]:
        raise StructuralError(
            f"candidate dim {candidates.shape[-1]} != action dim {actions.shape[-1]}"
        )
    diff = candidates - actions[..., None, :]
    return np.einsum("...kd,...kd->...k", diff, diff)


def soft_min(x, temperature):
    """``-T log sum_k exp(-x_k / T)`` along the last axis, max-shifted."""
    _check_temperature(temperature)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite distances in soft-min")
    x_min = x.min(axis=-1)
    shifted = np.exp(-(x - x_min[..., None]) / temperature)
    return x_min - temperature * np.log(shifted.sum(axis=-1))


def soft_aggregate(x, temperature):
    """``-T log((1/K) sum_k exp(-x_k / T))``; lies between min(x) and mean(x).

    Evaluated as ``x_min - T log1p(mean(expm1(-(x - x_min)/T)))`` so that the
    large-temperature regime keeps full precision.
    """
    _check_temperature(temperature)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite input to soft_aggregate")
    x_min = x.min(axis=-1)
    z = -(x - x_min[..., None]) / temperature
    return x_min - temperature * np.log1p(np.expm1(z).mean(axis=-1))


def aquadem_loss(candidates, action, temperature):
    """Soft-min reconstruction loss for one state: candidates (K, d), action (d,)."""
    return float(soft_min(squared_distances(candidates, action), temperature))


def soft_min_loss_and_grad(candidates, actions, temperature):
    """Batch-mean loss over candidates (n, K, d) and actions (n, d), plus d loss / d candidates."""
    _check_temperature(temperature)
    candidates = np.asarray(candidates, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    n = candidates.shape[0]
    diff = candidates - actions[:, None, :]
    x = np.einsum("nkd,nkd->nk", diff, diff)
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite distances in soft-min loss")
    x_min = x.min(axis=1, keepdims=True)
    e = np.exp(-(x - x_min) / temperature)
    total = e.sum(axis=1, keepdims=True)
    per_sample = x_min[:, 0] - temperature * np.log(total[:, 0])
    weights = e / total
    grad = 2.0 * diff * (weights / n)[..., None]
    return float(per_sample.mean()), grad


def mdn_logit_loss_and_grad(logits, distances, temperature):
    """Batch mean of ``-sum_k softmax(p)_k exp(-x_k/T)`` and its gradient w.r.t. the logits."""
    _check_temperature(temperature)
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    kernel = np.exp(-np.asarray(distances, dtype=np.float64) / temperature)
    expected = (probs * kernel).sum(axis=1, keepdims=True)
    loss = -float(expected.mean())
    grad = -probs * (kernel - expected) / n
    return loss, grad


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- models -------------------------------------------------------------------


@dataclass
class CandidateSet:
    state: np.ndarray
    actions: np.ndarray  # (K, action_dim)

    @property
    def K(self):
        return self.actions.shape[0]


def _bounds(action_dim, bounds):
    if bounds is None:
        low, high = -np.ones(action_dim), np.ones(action_dim)
    else:
        low, high = (np.broadcast_to(np.asarray(b, dtype=np.float64), (action_dim,)).copy() for b in bounds)
    if np.any(high <= low):
        raise InputError("action bounds need low < high")
    return low, high


class QuantizerModel:
    """Shared relu trunk feeding ``K`` heads; head outputs are tanh-squashed into the action box."""

    trait = "aquadem"

    def __init__(
        self,
        state_dim,
        action_dim,
        K,
        temperature,
        action_bounds=None,
        trunk_hidden=256,
        head_hidden=256,
        seed=0,
        trait="aquadem",
    ):
        if K < 1:
            raise InputError(f"K must be >= 1, got {K}")
        _check_temperature(temperature)
        rng = np.random.default_rng(seed)
        self.state_dim, self.action_dim, self.K = int(state_dim), int(action_dim), int(K)
        self.temperature = float(temperature)
        self.action_low, self.action_high = _bounds(action_dim, action_bounds)
        self.trunk = Mlp([state_dim, trunk_hidden], ["relu"], rng=rng)
        self.heads = [
            Mlp([trunk_hidden, head_hidden, action_dim], ["relu", "tanh"], rng=rng)
            for _ in range(K)
        ]
        self.trait = trait

    @property
    def state_independent(self):
        return False

    @property
    def _half_range(self):
        return 0.5 * (self.action_high - self.action_low)

    def modules(self):
        return [self.trunk, *self.heads]

    def _squash(self, t):
        return self.action_low + (t + 1.0) * self._half_range

    def forward(self, states, train=False, rng=None, dropout=NO_DROPOUT):
        """Candidates (n, K, action_dim) and a cache for :meth:`backward`."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if states.shape[1] != self.state_dim:
            raise StructuralError(f"state dim {states.shape[1]} != {self.state_dim}")
        trunk_drop = DropoutConfig(dropout.input_rate, 0.0)
        head_drop = DropoutConfig(dropout.hidden_rate, dropout.hidden_rate)
        feats, trunk_cache = self.trunk.forward(states, train, rng, trunk_drop)
        outs, head_caches = [], []
        for head in self.heads:
            out, cache = head.forward(feats, train, rng, head_drop)
            outs.append(out)
            head_caches.append(cache)
        cands = self._squash(np.stack(outs, axis=1))
        return cands, (feats, trunk_cache, head_caches)

    def backward(self, cache, grad_candidates):
        """Gradients for :meth:`modules`, in order."""
        _, trunk_cache, head_caches = cache
        grad_t = grad_candidates * self._half_range
        head_grads, grad_feats = [], 0.0
        for k, head in enumerate(self.heads):
            g, g_in = head.backward(head_caches[k], grad_t[:, k, :])
            head_grads.append(g)
            grad_feats = grad_feats + g_in
        trunk_grads, _ = self.trunk.backward(trunk_cache, grad_feats)
        return [trunk_grads, *head_grads]

    def candidate_actions(self, states):
        """Eval-mode candidates for a batch of states, shape (n, K, action_dim)."""
        return self.forward(states)[0]

    def actions(self, state):
        return self.candidate_actions(np.asarray(state, dtype=np.float64)[None, :])[0]

    def to_dict(self):
        return {
            "format": QUANTIZER_FORMAT,
            "version": QUANTIZER_VERSION,
            "trait": self.trait,
            "K": self.K,
            "temperature": self.temperature,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "action_low": self.action_low.tolist(),
            "action_high": self.action_high.tolist(),
            "trunk": self.trunk.to_dict(),
            "heads": [h.to_dict() for h in self.heads],
        }

    @classmethod
    def _restore(cls, obj, doc):
        obj.state_dim, obj.action_dim, obj.K = doc["state_dim"], doc["action_dim"], doc["K"]
        obj.temperature = float(doc["temperature"])
        obj.action_low = np.array(doc["action_low"], dtype=np.float64)
        obj.action_high = np.array(doc["action_high"], dtype=np.float64)
        obj.trunk = Mlp.from_dict(doc["trunk"])
        obj.heads = [Mlp.from_dict(h) for h in doc["heads"]]
        obj.trait = doc["trait"]
        if len(obj.heads) != obj.K:
            raise StructuralError("head count does not match K")
        return obj


class MdnModel(QuantizerModel):
    """Quantizer with an extra head producing one logit per candidate."""

    def __init__(self, state_dim, action_dim, K, temperature, action_bounds=None,
                 trunk_hidden=256, head_hidden=256, seed=0):
        super().__init__(state_dim, action_dim, K, temperature, action_bounds,
                         trunk_hidden, head_hidden, seed, trait="mdn")
        rng = np.random.default_rng([seed, 1])
        self.logit_head = Mlp([trunk_hidden, head_hidden, K], ["relu", "linear"], rng=rng)

    def logits(self, states):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return self.logit_head(self.trunk(states))

    def mixture_weights(self, states):
        return softmax(self.logits(states))

    def to_dict(self):
        doc = super().to_dict()
        doc["logit_head"] = self.logit_head.to_dict()
        return doc


class FixedCandidates:
    """The same ``K`` actions served at every state (k-means, bang-bang)."""

    def __init__(self, actions, trait):
        self.table = np.array(actions, dtype=np.float64)
        if self.table.ndim != 2 or self.table.shape[0] < 1:
            raise StructuralError("candidate table must be (K, action_dim)")
        self.trait = trait

    @property
    def K(self):
        return self.table.shape[0]

    @property
    def action_dim(self):
        return self.table.shape[1]

    @property
    def state_independent(self):
        return True

    def candidate_actions(self, states):
        n = np.atleast_2d(np.asarray(states)).shape[0]
        return np.broadcast_to(self.table, (n, *self.table.shape)).copy()

    def actions(self, state):
        return self.table.copy()

    def to_dict(self):
        return {
            "format": QUANTIZER_FORMAT,
            "version": QUANTIZER_VERSION,
            "trait": self.trait,
            "K": self.K,
            "action_dim": self.action_dim,
            "actions": self.table.tolist(),
        }


def generator_from_dict(doc):
    """Rebuild any candidate generator from its checkpoint document."""
    if doc.get("format") != QUANTIZER_FORMAT:
        raise StructuralError(f"not a quantizer checkpoint: {doc.get('format')!r}")
    if doc.get("version") != QUANTIZER_VERSION:
        raise StructuralError(f"unsupported quantizer version {doc.get('version')}")
    trait = doc.get("trait")
    if trait not in TRAITS:
        raise StructuralError(f"unknown trait {trait!r}")
    if trait in ("kmeans", "bangbang"):
        return FixedCandidates(doc["actions"], trait)
    if trait == "mdn":
        model = QuantizerModel._restore(object.__new__(MdnModel), doc)
        model.logit_head = Mlp.from_dict(doc["logit_head"])
        return model
    return QuantizerModel._restore(object.__new__(QuantizerModel), doc)


def candidates(model, state):
    state = np.asarray(state, dtype=np.float64)
    return CandidateSet(state=state, actions=model.actions(state))


def project_action(candidate_set, action):
    """Index of the Euclidean-nearest candidate; ties go to the lowest index."""
    table = candidate_set.actions if isinstance(candidate_set, CandidateSet) else candidate_set
    return int(np.argmin(squared_distances(table, action)))


def project_actions(candidate_batch, actions):
    """Vectorised :func:`project_action` over (n, K, d) candidates and (n, d) actions."""
    return np.argmin(squared_distances(candidate_batch, actions), axis=1)


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 256
    gradient_steps: int = 50_000
    input_dropout: float = 0.1
    hidden_dropout: float = 0.1
    temperature: float = 0.001
    K: int = 10
    trunk_hidden: int = 256
    head_hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.gradient_steps < 0:
            raise InputError("gradient_steps must be >= 0")
        _check_temperature(self.temperature)

    @property
    def dropout(self):
        return DropoutConfig(self.input_dropout, self.hidden_dropout)


@dataclass
class TrainResult:
    model: QuantizerModel
    loss_trace: list = field(default_factory=list)
    logit_loss_trace: list = field(default_factory=list)


def _demo_arrays(dataset):
    states, actions = dataset.arrays() if hasattr(dataset, "arrays") else dataset
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if states.shape[0] == 0:
        raise InputError("empty demonstration dataset")
    if states.shape[0] != actions.shape[0] or actions.ndim != 2:
        raise InputError("states and actions must be aligned 2-d arrays")
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
        raise InputError("demonstrations contain non-finite values")
    return states, actions


def train_quantizer(dataset, config: TrainConfig, action_bounds=None, mdn=False):
    """Fit a quantizer (or an MDN when ``mdn``) with Adam on random minibatches.

    ``dataset`` is a DemoDataset or a ``(states, actions)`` pair. Fully
    deterministic given ``config.seed``.
    """
    states, actions = _demo_arrays(dataset)
    cls = MdnModel if mdn else QuantizerModel
    model = cls(states.shape[1], actions.shape[1], config.K, config.temperature,
                action_bounds, config.trunk_hidden, config.head_hidden, seed=config.seed)
    rng = np.random.default_rng([config.seed, 7])
    opt = Adam(model.modules(), config.learning_rate)
    logit_opt = Adam([model.logit_head], config.learning_rate) if mdn else None
    result = TrainResult(model)
    dropout = config.dropout
    n = states.shape[0]
    for step in range(config.gradient_steps):
        idx = rng.integers(0, n, size=config.batch_size)
        s, a = states[idx], actions[idx]
        cands, cache = model.forward(s, train=True, rng=rng, dropout=dropout)
        loss, grad_cands = soft_min_loss_and_grad(cands, a, model.temperature)
        if not math.isfinite(loss):
            raise NumericalError(f"quantizer loss diverged at step {step}", step=step)
        if mdn:
            # logit objective sees trunk features and candidates as constants
            feats = cache[0]
            logits, lcache = model.logit_head.forward(feats, True, rng, DropoutConfig(dropout.hidden_rate, dropout.hidden_rate))
            logit_loss, grad_logits = mdn_logit_loss_and_grad(
                logits, squared_distances(cands, a), model.temperature)
            logit_grads, _ = model.logit_head.backward(lcache, grad_logits)
            result.logit_loss_trace.append(logit_loss)
        try:
            opt.step(model.backward(cache, grad_cands))
            if mdn:
                logit_opt.step([logit_grads])
        except NumericalError as exc:
            raise NumericalError(f"{exc} at step {step}", step=step, layer=exc.layer) from exc
        result.loss_trace.append(loss)
    return result


def mdn_loss(model: MdnModel, state, action):
    """``(psi_loss, logit_loss)`` for one or more (state, action) pairs (batch mean)."""
    states = np.atleast_2d(np.asarray(state, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(action, dtype=np.float64))
    cands = model.candidate_actions(states)
    psi_loss, _ = soft_min_loss_and_grad(cands, actions, model.temperature)
    logit_loss, _ = mdn_logit_loss_and_grad(
        model.logits(states), squared_distances(cands, actions), model.temperature)
    return psi_loss, logit_loss


def mdn_sample(model: MdnModel, state, rng):
    """Draw one candidate with probability given by the mixture weights."""
    state = np.asarray(state, dtype=np.float64)
    probs = model.mixture_weights(state[None, :])[0]
    k = rng.choice(model.K, p=probs)
    return model.actions(state)[k]


# -- ablation candidate generators ---------------------------------------------


def kmeans_candidates(dataset, K, seed=0, max_iters=100, tol=1e-9):
    """State-independent candidates: Lloyd's algorithm on the demonstrated actions.

    Seeded with k-means++. An empty cluster is re-seeded at the point farthest
    from its current centre.
    """
    _, actions = _demo_arrays(dataset)
    n_distinct = np.unique(actions, axis=0).shape[0]
    if K > n_distinct:
        raise DegenerateClusterError(f"K={K} exceeds the {n_distinct} distinct actions")
    rng = np.random.default_rng(seed)
    n = actions.shape[0]
    centers = [actions[rng.integers(n)]]
    for _ in range(1, K):
        d2 = ((actions[:, None, :] - np.array(centers)[None]) ** 2).sum(-1).min(axis=1)
        centers.append(actions[rng.choice(n, p=d2 / d2.sum())])
    centers = np.array(centers)
    for _ in range(max_iters):
        d2 = squared_distances(np.broadcast_to(centers, (n, *centers.shape)), actions)
        assign = np.argmin(d2, axis=1)
        new = centers.copy()
        for k in range(K):
            members = actions[assign == k]
            if members.shape[0] == 0:
                new[k] = actions[np.argmax(d2[np.arange(n), assign])]
            else:
                new[k] = members.mean(axis=0)
        moved = np.abs(new - centers).max()
        centers = new
        if moved < tol:
            break
    return FixedCandidates(centers, "kmeans")


def random_candidates(state_dim, action_dim, K, bounds=None, seed=0,
                      trunk_hidden=256, head_hidden=256):
    """An untrained, randomly initialised quantizer served as-is."""
    return QuantizerModel(state_dim, action_dim, K, 1.0, bounds, trunk_hidden,
                          head_hidden, seed=seed, trait="random")


def gmm_nll_identity_check(model, state, action):
    """Mixture-of-Gaussians reading of the loss.

    With a uniform prior 1/K and variance T, the negative log-likelihood
    (dropping state- and action-independent terms) equals loss/T + log K.
    Returns ``(lhs, rhs, log K)`` where ``lhs`` is the mixture NLL computed
    directly and ``rhs`` goes through :func:`aquadem_loss`.
    """
    cands = model.actions(state) if hasattr(model, "actions") else np.asarray(model)
    T = model.temperature if hasattr(model, "temperature") else None
    if T is None:
        raise InputError("model must carry a temperature")
    _check_temperature(T)
    x = squared_distances(cands, action)
    K = x.shape[0]
    # log-mean-exp through log1p/expm1, a different route than soft_min
    x_min = x.min()
    lhs = x_min / T - math.log1p(float(np.expm1(-(x - x_min) / T).mean()))
    constant = math.log(K)
    rhs = aquadem_loss(cands, action, T) / T + constant
    return lhs, rhs, constant
