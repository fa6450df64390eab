"""Independent reference implementations used as test oracles.

Deliberately naive: literal loops, no shared code with the package.
"""

import math
from fractions import Fraction

import numpy as np


def split_log(flags):
    """Single-pass splitter. ``flags[i]`` is True where record i ends an episode.

    Returns a list of (start, stop) index ranges.
    """
    spans, start = [], 0
    for i, end in enumerate(flags):
        if end:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(flags):
        spans.append((start, len(flags)))
    return spans


def r_avg(rewards):
    """Exact rational mean, rounded once."""
    return float(exact_avg(rewards))


def exact_avg(rewards):
    total = Fraction(0)
    for r in rewards:
        total += Fraction(r)
    return total / len(rewards)


def r_disc(rewards, gamma, relative=False):
    """Mean over start indices j of the discounted tail sum, as an O(n^2) double loop.

    Steps are 1-based; the exponent is h (absolute) or h - j (relative).
    """
    n = len(rewards)
    outer = 0.0
    for j in range(1, n + 1):
        inner = 0.0
        for h in range(j, n + 1):
            power = h - j if relative else h
            inner += gamma**power * rewards[h - 1]
        outer += inner
    return outer / n


def flat_mean(values):
    total, count = 0.0, 0
    for v in values:
        total += v
        count += 1
    return total / count


def expectile_bisect(values, tau, iters=200):
    """Root of tau * sum (x - v)+ - (1 - tau) * sum (v - x)+ by bisection."""
    lo, hi = min(values), max(values)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        g = 0.0
        for x in values:
            g += tau * (x - mid) if x >= mid else -(1 - tau) * (mid - x)
        if g > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def grid_distance(s, n):
    """Manhattan distance to the bottom-right goal of an n x n grid."""
    r, c = divmod(s, n)
    return (n - 1 - r) + (n - 1 - c)


def empirical_policy_evaluation(transitions, n_states, n_actions, gamma):
    """Exact Q of the empirical behavior policy on the empirical MDP via a linear solve.

    ``transitions`` is a list of (s, a, r, s2, terminal). Unseen next states
    have value 0.
    """
    counts = np.zeros((n_states, n_actions))
    r_sum = np.zeros((n_states, n_actions))
    nxt = np.zeros((n_states, n_actions, n_states))
    for s, a, r, s2, term in transitions:
        counts[s, a] += 1
        r_sum[s, a] += r
        if not term:
            nxt[s, a, s2] += 1
    pairs = [(s, a) for s in range(n_states) for a in range(n_actions) if counts[s, a] > 0]
    index = {p: k for k, p in enumerate(pairs)}
    n_s = counts.sum(axis=1)
    A = np.eye(len(pairs))
    b = np.zeros(len(pairs))
    for (s, a), k in index.items():
        b[k] = r_sum[s, a] / counts[s, a]
        for s2 in range(n_states):
            p = nxt[s, a, s2] / counts[s, a]
            if p == 0 or n_s[s2] == 0:
                continue
            for a2 in range(n_actions):
                if counts[s2, a2] > 0:
                    A[k, index[(s2, a2)]] -= gamma * p * counts[s2, a2] / n_s[s2]
    x = np.linalg.solve(A, b)
    q = np.zeros((n_states, n_actions))
    for (s, a), k in index.items():
        q[s, a] = x[k]
    return q


def chi_square_stat(observed, expected):
    return math.fsum((o - e) ** 2 / e for o, e in zip(observed, expected))
