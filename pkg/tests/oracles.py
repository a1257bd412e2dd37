"""Reference computations that share no code with the package.

Each oracle takes a different route to the same quantity: arbitrary
precision arithmetic, an exact linear program, or a plain loop.
"""

import math

import mpmath
import numpy as np
from scipy.optimize import linprog

mpmath.mp.dps = 50


def soft_min_mp(x, T):
    """``-T log sum exp(-x/T)`` in 50-digit arithmetic."""
    T = mpmath.mpf(T)
    total = mpmath.fsum(mpmath.exp(-mpmath.mpf(float(v)) / T) for v in x)
    return float(-T * mpmath.log(total))


def soft_aggregate_mp(x, T):
    T = mpmath.mpf(T)
    total = mpmath.fsum(mpmath.exp(-mpmath.mpf(float(v)) / T) for v in x) / len(x)
    return float(-T * mpmath.log(total))


def mixture_nll_mp(candidates, action, T):
    """NLL of ``action`` under an equal-weight isotropic Gaussian mixture with
    variance ``T`` (normalising constants of the Gaussian dropped)."""
    T = mpmath.mpf(T)
    terms = []
    for c in candidates:
        sq = mpmath.fsum((mpmath.mpf(float(ci)) - mpmath.mpf(float(ai))) ** 2
                         for ci, ai in zip(c, action))
        terms.append(mpmath.exp(-sq / T) / len(candidates))
    return float(-mpmath.log(mpmath.fsum(terms)))


def exact_ot(x, y, a=None, b=None):
    """Unregularised optimal transport cost with squared Euclidean ground cost (LP)."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    n, m = len(x), len(y)
    a = np.full(n, 1.0 / n) if a is None else np.asarray(a)
    b = np.full(m, 1.0 / m) if b is None else np.asarray(b)
    cost = np.array([[float(np.sum((xi - yj) ** 2)) for yj in y] for xi in x])
    rows = np.zeros((n, n * m))
    cols = np.zeros((m, n * m))
    for i in range(n):
        rows[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        cols[j, j::m] = 1.0
    res = linprog(cost.reshape(-1), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([a, b]),
                  bounds=(0, None), method="highs")
    assert res.success
    return float(res.fun)


def munchausen_target_loop(r, a, q_s, q_next, discount, done, tau, alpha, l0):
    """One Munchausen target evaluated term by term with math.* only."""
    def log_policy(q):
        m = max(q)
        lse = m / tau + math.log(sum(math.exp((v - m) / tau) for v in q))
        return [v / tau - lse for v in q]

    log_pi = log_policy(q_s)
    bonus = alpha * tau * min(max(log_pi[a], l0), 0.0)
    log_pi_next = log_policy(q_next)
    soft_v = sum(math.exp(lp) * (q - tau * lp) for lp, q in zip(log_pi_next, q_next))
    return r + bonus + (0.0 if done else discount * soft_v)


def bce_loop(logits_demo, logits_agent):
    total = 0.0
    for l in logits_demo:
        total += -math.log(1.0 / (1.0 + math.exp(-l)))
    for l in logits_agent:
        total += -math.log(1.0 - 1.0 / (1.0 + math.exp(-l)))
    return total / (len(logits_demo) + len(logits_agent))
