"""Small numpy MLPs with hand-written backprop, dropout and Adam.

Every learned model in the package (quantizer heads, Q-networks,
discriminators, BC policies) is a composition of :class:`Mlp` objects.
All arithmetic is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from aquadem.errors import NumericalError, StructuralError

ACTIVATIONS = ("relu", "tanh", "elu", "linear", "layer_norm_tanh")
LN_EPS = 1e-5
CHECKPOINT_FORMAT = "aquadem-mlp"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DropoutConfig:
    input_rate: float = 0.0
    hidden_rate: float = 0.0

    def __post_init__(self):
        for name in ("input_rate", "hidden_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {rate}")


NO_DROPOUT = DropoutConfig()


@dataclass
class ForwardCache:
    """Everything backward() needs; tied to one network at one parameter version."""

    owner: int
    version: int
    squeeze: bool
    inputs: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    normed: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


def _init_limit(activation, fan_in, fan_out):
    if activation in ("relu", "elu"):
        return np.sqrt(6.0 / fan_in)  # He-uniform
    return np.sqrt(6.0 / (fan_in + fan_out))  # Glorot-uniform


class Mlp:
    """Fully connected network; ``activations[i]`` follows linear layer ``i``."""

    def __init__(self, layer_dims, activations, rng=None):
        layer_dims = [int(d) for d in layer_dims]
        activations = list(activations)
        if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
            raise StructuralError(f"invalid layer_dims {layer_dims}")
        if len(activations) != len(layer_dims) - 1:
            raise StructuralError(
                f"need {len(layer_dims) - 1} activations, got {len(activations)}"
            )
        for act in activations:
            if act not in ACTIVATIONS:
                raise StructuralError(f"unknown activation {act!r}")
        rng = np.random.default_rng(rng)
        self.layer_dims = layer_dims
        self.activations = activations
        self.weights, self.biases, self.ln_gains, self.ln_biases = [], [], [], []
        for i, act in enumerate(activations):
            fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
            limit = _init_limit(act, fan_in, fan_out)
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
            if act == "layer_norm_tanh":
                self.ln_gains.append(np.ones(fan_out))
                self.ln_biases.append(np.zeros(fan_out))
            else:
                self.ln_gains.append(None)
                self.ln_biases.append(None)
        self.version = 0

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def params(self):
        """Parameter arrays in a fixed order (W, b[, gain, beta]) per layer."""
        out = []
        for i in range(len(self.weights)):
            out.append(self.weights[i])
            out.append(self.biases[i])
            if self.ln_gains[i] is not None:
                out.append(self.ln_gains[i])
                out.append(self.ln_biases[i])
        return out

    def param_layers(self):
        """Layer index of each entry of :meth:`params`."""
        out = []
        for i in range(len(self.weights)):
            out += [i] * (4 if self.ln_gains[i] is not None else 2)
        return out

    def touch(self):
        self.version += 1

    def copy(self):
        clone = object.__new__(Mlp)
        clone.layer_dims = list(self.layer_dims)
        clone.activations = list(self.activations)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone.ln_gains = [None if g is None else g.copy() for g in self.ln_gains]
        clone.ln_biases = [None if b is None else b.copy() for b in self.ln_biases]
        clone.version = 0
        return clone

    def load_params_from(self, other):
        for dst, src in zip(self.params(), other.params()):
            if dst.shape != src.shape:
                raise StructuralError("parameter shapes differ")
            dst[...] = src
        self.touch()

    # -- forward / backward -------------------------------------------------

    def forward(self, x, train=False, rng=None, dropout=NO_DROPOUT):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise StructuralError(
                f"input has shape {x.shape}, expected (*, {self.in_dim})"
            )
        if train and (dropout.input_rate > 0 or dropout.hidden_rate > 0) and rng is None:
            raise StructuralError("train-mode dropout needs an rng")
        cache = ForwardCache(owner=id(self), version=self.version, squeeze=squeeze)
        h = x
        for i, act in enumerate(self.activations):
            rate = dropout.input_rate if i == 0 else dropout.hidden_rate
            mask = None
            if train and rate > 0:
                mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
                h = h * mask
            cache.inputs.append(h)
            cache.masks.append(mask)
            z = h @ self.weights[i] + self.biases[i]
            cache.pre.append(z)
            normed = None
            if act == "relu":
                h = np.maximum(z, 0.0)
            elif act == "tanh":
                h = np.tanh(z)
            elif act == "elu":
                h = np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
            elif act == "linear":
                h = z
            else:
                centred = z - z.mean(axis=1, keepdims=True)
                var = np.einsum("ij,ij->i", centred, centred)[:, None] / z.shape[1]
                inv_std = 1.0 / np.sqrt(var + LN_EPS)
                xhat = centred * inv_std
                normed = (xhat, inv_std)
                h = np.tanh(xhat * self.ln_gains[i] + self.ln_biases[i])
            cache.normed.append(normed)
            cache.outputs.append(h)
        return (h[0] if squeeze else h), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        if cache.owner != id(self) or cache.version != self.version:
            raise StructuralError("stale or foreign forward cache")
        g = np.asarray(grad_out, dtype=np.float64)
        if cache.squeeze:
            g = g[None, :]
        if g.shape != cache.outputs[-1].shape:
            raise StructuralError(
                f"output gradient shape {g.shape} != {cache.outputs[-1].shape}"
            )
        grads_rev = []
        for i in reversed(range(len(self.activations))):
            act = self.activations[i]
            z, out = cache.pre[i], cache.outputs[i]
            layer_grads = []
            if act == "relu":
                gz = g * (z > 0)
            elif act == "tanh":
                gz = g * (1.0 - out * out)
            elif act == "elu":
                gz = g * np.where(z > 0, 1.0, out + 1.0)
            elif act == "linear":
                gz = g
            else:
                xhat, inv_std = cache.normed[i]
                gy = g * (1.0 - out * out)
                layer_grads = [(gy * xhat).sum(axis=0), gy.sum(axis=0)]
                gx = gy * self.ln_gains[i]
                n = z.shape[1]
                gz = inv_std * (
                    gx
                    - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=1, keepdims=True) / n
                )
            h_in = cache.inputs[i]
            layer_grads = [h_in.T @ gz, gz.sum(axis=0)] + layer_grads
            grads_rev.append(layer_grads)
            g = gz @ self.weights[i].T
            if cache.masks[i] is not None:
                g = g * cache.masks[i]
        grads = [arr for layer in reversed(grads_rev) for arr in layer]
        return grads, (g[0] if cache.squeeze else g)

    # -- serialisation --------------------------------------------------------

    def to_dict(self):
        layers = []
        for i in range(len(self.weights)):
            entry = {
                "weight": self.weights[i].tolist(),
                "bias": self.biases[i].tolist(),
            }
            if self.ln_gains[i] is not None:
                entry["ln_gain"] = self.ln_gains[i].tolist()
                entry["ln_bias"] = self.ln_biases[i].tolist()
            layers.append(entry)
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "layer_dims": list(self.layer_dims),
            "activations": list(self.activations),
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise StructuralError(f"not an mlp checkpoint: {doc.get('format')!r}")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise StructuralError(f"unsupported checkpoint version {doc.get('version')}")
        mlp = cls(doc["layer_dims"], doc["activations"], rng=0)
        for i, entry in enumerate(doc["layers"]):
            w = np.array(entry["weight"], dtype=np.float64)
            b = np.array(entry["bias"], dtype=np.float64)
            if w.shape != mlp.weights[i].shape or b.shape != mlp.biases[i].shape:
                raise StructuralError(f"layer {i} shape does not match layer_dims")
            mlp.weights[i], mlp.biases[i] = w, b
            if mlp.ln_gains[i] is not None:
                mlp.ln_gains[i] = np.array(entry["ln_gain"], dtype=np.float64)
                mlp.ln_biases[i] = np.array(entry["ln_bias"], dtype=np.float64)
        return mlp


def dumps_document(doc):
    # json emits repr() floats: shortest string that round-trips exactly
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def save_document(doc, path):
    Path(path).write_text(dumps_document(doc))


def load_document(path):
    return json.loads(Path(path).read_text())


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list | None = None
    second_moment: list | None = None


def adam_step(params, gradients, state, layer_index=None):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    ``layer_index`` maps each parameter to a layer number for error messages.
    """
    if len(params) != len(gradients):
        raise StructuralError(f"{len(params)} params but {len(gradients)} gradients")
    for j, (p, g) in enumerate(zip(params, gradients)):
        if p.shape != np.shape(g):
            raise StructuralError(f"param {j}: shape {p.shape} vs gradient {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            layer = layer_index[j] if layer_index is not None else j
            raise NumericalError(f"non-finite gradient in layer {layer}", layer=layer)
    m_prev = state.first_moment or [np.zeros_like(p) for p in params]
    v_prev = state.second_moment or [np.zeros_like(p) for p in params]
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1, corr2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, m_new, v_new = [], [], []
    for p, g, m, v in zip(params, gradients, m_prev, v_prev):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        step = state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        new_params.append(p - step)
        m_new.append(m)
        v_new.append(v)
    new_state = AdamState(
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
        step_count=t,
        first_moment=m_new,
        second_moment=v_new,
    )
    return new_params, new_state


class Adam:
    """Adam over the parameters of one or more :class:`Mlp` modules, in place.

    Same update as :func:`adam_step`, rearranged to avoid temporaries:
    ``lr * sqrt(c2) / c1 * m / (sqrt(v) + eps * sqrt(c2))``.
    """

    def __init__(self, modules: Sequence[Mlp], learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.modules = list(modules)
        self.learning_rate, self.beta1, self.beta2, self.epsilon = learning_rate, beta1, beta2, epsilon
        self.step_count = 0
        params = self._params()
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self._tmp = [np.empty_like(p) for p in params]
        self._layer_index = []
        for m_idx, module in enumerate(self.modules):
            self._layer_index += [f"{m_idx}:{layer}" for layer in module.param_layers()]

    def _params(self):
        return [p for m in self.modules for p in m.params()]

    @property
    def state(self):
        return AdamState(self.learning_rate, self.beta1, self.beta2, self.epsilon,
                         self.step_count, self.m, self.v)

    def step(self, grads_per_module):
        params = self._params()
        grads = [g for gs in grads_per_module for g in gs]
        if len(grads) != len(params):
            raise StructuralError(f"{len(params)} params but {len(grads)} gradients")
        for j, g in enumerate(grads):
            if g.shape != params[j].shape:
                raise StructuralError(f"param {j}: shape {params[j].shape} vs gradient {g.shape}")
            if not np.isfinite(g).all():
                layer = self._layer_index[j]
                raise NumericalError(f"non-finite gradient in layer {layer}", layer=layer)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        sqrt_c2 = np.sqrt(1.0 - b2**t)
        lr_t = self.learning_rate * sqrt_c2 / (1.0 - b1**t)
        eps_t = self.epsilon * sqrt_c2
        for p, g, m, v, tmp in zip(params, grads, self.m, self.v, self._tmp):
            m *= b1
            m += (1.0 - b1) * g
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - b2
            v *= b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp += eps_t
            np.divide(m, tmp, out=tmp)
            tmp *= lr_t
            p -= tmp
        for module in self.modules:
            module.touch()


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst: tuple | None

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def finite_difference_check(
    loss_fn: Callable[[], tuple[float, list]],
    params: list,
    tolerance=1e-4,
    step=1e-5,
    floor=1e-6,
):
    """Compare analytic gradients against central differences.

    ``loss_fn()`` evaluates the loss at the current values of ``params`` (which
    are perturbed in place) and returns ``(loss, gradients)`` aligned with
    ``params``. Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    _, analytic = loss_fn()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst_err, worst = 0.0, None
    for j, p in enumerate(params):
        flat = p.reshape(-1)
        grad = analytic[j].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            plus = loss_fn()[0]
            flat[idx] = orig - step
            minus = loss_fn()[0]
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(grad[idx]), abs(numeric), floor)
            err = abs(grad[idx] - numeric) / denom
            if err > worst_err:
                worst_err, worst = err, (j, idx)
    return GradCheckReport(worst_err, tolerance, worst)
