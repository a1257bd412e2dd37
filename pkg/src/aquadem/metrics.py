"""Evaluation: rollouts, success rate, Sinkhorn state-distribution distance,
action-field exports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from aquadem.errors import InputError

HEAD_COLORS = (
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


@dataclass(frozen=True)
class EvalProtocol:
    eval_every: int = 2000
    n_episodes: int = 20
    greedy: bool = True


@dataclass
class EvalResult:
    success_rate: float
    mean_return: float | None
    states: np.ndarray = field(repr=False)
    episode_lengths: list = field(default_factory=list, repr=False)


def evaluate(policy, env, n_episodes, seed, read_reward=True):
    """Roll out ``policy(state) -> action`` on a fresh clone of ``env``.

    Success means the goal was reached at some point in the episode, read
    from ``env.in_goal`` rather than the reward. Returns are only summed when
    ``read_reward`` is set.
    """
    env = env.clone()
    rng = np.random.default_rng(seed)
    successes, returns, visited, lengths = 0, [], [], []
    for _ in range(n_episodes):
        state = env.reset(rng)
        visited.append(state)
        total, success, done, t = 0.0, False, False, 0
        while not done:
            state, reward, done = env.step(policy(state))
            visited.append(state)
            t += 1
            success = success or env.in_goal(state)
            if read_reward:
                total += reward
        successes += success
        returns.append(total)
        lengths.append(t)
    return EvalResult(
        success_rate=successes / n_episodes,
        mean_return=float(np.mean(returns)) if read_reward else None,
        states=np.array(visited),
        episode_lengths=lengths,
    )


def success_rate(policy, env, protocol: EvalProtocol, seed):
    return evaluate(policy, env, protocol.n_episodes, seed, read_reward=False).success_rate


# -- optimal transport --------------------------------------------------------


@dataclass
class PointCloud:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.points.shape[0] == 0:
            raise InputError("empty point cloud")
        if self.weights.shape != (self.points.shape[0],) or np.any(self.weights < 0):
            raise InputError("weights must be nonnegative, one per point")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise InputError(f"weights sum to {self.weights.sum()}, not 1")

    @classmethod
    def uniform(cls, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        if n == 0:
            raise InputError("empty point cloud")
        return cls(points, np.full(n, 1.0 / n))


@dataclass
class SinkhornResult:
    value: float
    marginal_error: float
    converged: bool
    iterations: int

    def __float__(self):
        return self.value


def _as_cloud(x):
    return x if isinstance(x, PointCloud) else PointCloud.uniform(x)


def _sq_cost(x, y):
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijd,ijd->ij", diff, diff)


def _lse_rows(m):
    top = m.max(axis=1)
    return top + np.log(np.exp(m - top[:, None]).sum(axis=1))


def _entropic_ot(a, b, cost, epsilon, max_iters, tol):
    """Dual value of entropic OT by log-domain Sinkhorn with epsilon annealing.

    The temperature halves each iteration from the cost diameter down to
    ``epsilon``, then alternating updates run until the row-marginal L1
    error (columns are exact after each update) drops below ``tol``.
    """
    cost_t = np.ascontiguousarray(cost.T)
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(a.shape[0])
    g = np.zeros(b.shape[0])
    eps = max(float(cost.max()), epsilon)
    err, it = np.inf, 0
    for it in range(1, max_iters + 1):
        f = -eps * _lse_rows(log_b[None, :] + (g[None, :] - cost) / eps)
        g = -eps * _lse_rows(log_a[None, :] + (f[None, :] - cost_t) / eps)
        if eps > epsilon:
            eps = max(0.5 * eps, epsilon)
            continue
        log_plan = (f[:, None] + g[None, :] - cost) / eps + log_a[:, None] + log_b[None, :]
        err = float(np.abs(np.exp(log_plan).sum(axis=1) - a).sum())
        if err < tol:
            break
    return float(a @ f + b @ g), err, bool(err < tol), it


def _entropic_ot_self(a, cost, epsilon, max_iters, tol):
    """Self-transport term: one potential, averaged symmetric updates.

    Plain alternating updates oscillate on this symmetric problem; averaging
    the potential with its image converges in a handful of iterations.
    """
    log_a = np.log(a)
    f = np.zeros(a.shape[0])
    eps = max(float(cost.max()), epsilon)
    err, it = np.inf, 0
    for it in range(1, max_iters + 1):
        f = 0.5 * (f - eps * _lse_rows(log_a[None, :] + (f[None, :] - cost) / eps))
        if eps > epsilon:
            eps = max(0.5 * eps, epsilon)
            continue
        log_plan = (f[:, None] + f[None, :] - cost) / eps + log_a[:, None] + log_a[None, :]
        err = float(np.abs(np.exp(log_plan).sum(axis=1) - a).sum())
        if err < tol:
            break
    return float(2.0 * a @ f), err, bool(err < tol), it


def _canonical_pair(cx, cy):
    # solve in a fixed argument order so the result is exactly symmetric
    kx = (cx.points.shape[0], cx.points.tobytes(), cx.weights.tobytes())
    ky = (cy.points.shape[0], cy.points.tobytes(), cy.weights.tobytes())
    return (cx, cy) if kx <= ky else (cy, cx)


def sinkhorn_distance(x, y, epsilon=1e-3, max_iters=10000, tol=1e-6, debias=True):
    """Entropic OT distance with squared Euclidean ground cost.

    ``x`` and ``y`` are :class:`PointCloud` objects or raw point arrays
    (uniform weights). With ``debias`` the self-transport terms are removed,
    ``OT(x, y) - (OT(x, x) + OT(y, y)) / 2``, so identical clouds score 0.
    """
    if not epsilon > 0:
        raise InputError("epsilon must be > 0")
    cx, cy = _as_cloud(x), _as_cloud(y)
    if cx.points.shape[1] != cy.points.shape[1]:
        raise InputError("point dimension mismatch")
    # zero-weight points carry no mass and would put -inf into the logs
    cx = PointCloud(cx.points[cx.weights > 0], cx.weights[cx.weights > 0])
    cy = PointCloud(cy.points[cy.weights > 0], cy.weights[cy.weights > 0])
    cx, cy = _canonical_pair(cx, cy)
    value, err, conv, iters = _entropic_ot(
        cx.weights, cy.weights, _sq_cost(cx.points, cy.points), epsilon, max_iters, tol)
    if debias:
        vx, ex, cvx, ix = _entropic_ot_self(
            cx.weights, _sq_cost(cx.points, cx.points), epsilon, max_iters, tol)
        vy, ey, cvy, iy = _entropic_ot_self(
            cy.weights, _sq_cost(cy.points, cy.points), epsilon, max_iters, tol)
        value = max(value - 0.5 * (vx + vy), 0.0)
        err, conv, iters = max(err, ex, ey), conv and cvx and cvy, max(iters, ix, iy)
    return SinkhornResult(value, err, conv, iters)


def subsample(points, cap, rng):
    points = np.asarray(points)
    if points.shape[0] <= cap:
        return points
    idx = np.sort(rng.choice(points.shape[0], size=cap, replace=False))
    return points[idx]


@dataclass
class DistanceSummary:
    median: float
    q25: float
    q75: float
    values: list = field(repr=False, default_factory=list)


def demo_holdout_distance(demos, k_holdout=5, n_repeats=100, seed=0, epsilon=1e-2, cap=2000):
    """Distance between ``k_holdout`` random demo episodes and the rest, repeated."""
    n_ep = len(demos.episodes)
    if not 0 < k_holdout < n_ep:
        raise InputError(f"k_holdout must be in [1, {n_ep - 1}]")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_repeats):
        chosen = set(rng.choice(n_ep, size=k_holdout, replace=False).tolist())
        held = np.concatenate([demos.episodes[i].states for i in sorted(chosen)])
        rest = np.concatenate([ep.states for i, ep in enumerate(demos.episodes) if i not in chosen])
        d = sinkhorn_distance(subsample(held, cap, rng), subsample(rest, cap, rng), epsilon)
        values.append(d.value)
    q25, med, q75 = np.percentile(values, [25, 50, 75])
    return DistanceSummary(float(med), float(q25), float(q75), values)


def summary_csv(summary: DistanceSummary):
    return f"median,q25,q75\n{summary.median!r},{summary.q25!r},{summary.q75!r}\n"


# -- action fields ------------------------------------------------------------


def probe_grid(n=20, low=0.0, high=1.0):
    """Cell centres of an ``n x n`` grid over the square."""
    ticks = low + (np.arange(n) + 0.5) * (high - low) / n
    return np.array([(x, y) for x in ticks for y in ticks])


def action_field_export(generator, probe_states):
    """One record per (probe state, head); head order is the generator's."""
    probe_states = np.atleast_2d(np.asarray(probe_states, dtype=np.float64))
    cands = generator.candidate_actions(probe_states)
    records = []
    for i, state in enumerate(probe_states):
        for k in range(cands.shape[1]):
            records.append({"state": state.tolist(), "head": k, "action": cands[i, k].tolist()})
    return records


def field_csv(records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "head", "ax", "ay"])
    for r in records:
        writer.writerow([repr(r["state"][0]), repr(r["state"][1]), r["head"],
                         repr(r["action"][0]), repr(r["action"][1])])
    return buf.getvalue()


def field_svg(records, size=480, arrow=0.018, title=""):
    """Arrows from each probe state along each head's unit direction, one colour per head."""
    margin = 20
    scale = size - 2 * margin

    def px(x, y):
        return margin + x * scale, margin + (1.0 - y) * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="{margin}" y="{margin}" width="{scale}" height="{scale}" '
        'fill="white" stroke="black"/>',
    ]
    if title:
        parts.append(f'<text x="{margin}" y="14" font-size="12">{title}</text>')
    for r in records:
        (x, y), (ax, ay) = r["state"][:2], r["action"][:2]
        norm = np.hypot(ax, ay)
        if norm < 1e-12:
            continue
        x0, y0 = px(x, y)
        x1, y1 = px(x + arrow * ax / norm, y + arrow * ay / norm)
        color = HEAD_COLORS[r["head"] % len(HEAD_COLORS)]
        parts.append(
            f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
            f'stroke="{color}" stroke-width="1.2"/>'
        )
        parts.append(f'<circle cx="{x1:.2f}" cy="{y1:.2f}" r="1.3" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def support_probes(probes, demo_states, radius):
    """Probe states within ``radius`` of at least one demonstration state."""
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    d2 = _sq_cost(probes, np.asarray(demo_states, dtype=np.float64))
    return probes[d2.min(axis=1) <= radius * radius]


def mode_coverage(generator, probes, modes, max_angle_deg=15.0):
    """Fraction of probes whose candidate set has, for every mode direction,
    some candidate within ``max_angle_deg`` of it. Zero candidates match nothing."""
    cands = generator.candidate_actions(np.atleast_2d(probes))
    modes = np.asarray(modes, dtype=np.float64)
    modes = modes / np.linalg.norm(modes, axis=1, keepdims=True)
    norms = np.linalg.norm(cands, axis=2, keepdims=True)
    unit = np.where(norms > 1e-12, cands / np.maximum(norms, 1e-12), 0.0)
    cos = np.einsum("nkd,md->nkm", unit, modes)
    hit = (cos >= np.cos(np.radians(max_angle_deg))).any(axis=1).all(axis=1)
    return float(hit.mean())


def candidate_spread(generator, probes):
    """Largest pairwise distance within each candidate set, averaged over probes."""
    cands = generator.candidate_actions(np.atleast_2d(probes))
    diff = cands[:, :, None, :] - cands[:, None, :, :]
    return float(np.sqrt((diff ** 2).sum(axis=-1)).max(axis=(1, 2)).mean())
