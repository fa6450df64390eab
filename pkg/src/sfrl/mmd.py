"""Maximum mean discrepancy between action samples, used as a policy-constraint diagnostic."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .learners import BehaviorEstimate, LearnedModel

GAUSSIAN = "gaussian"
LAPLACIAN = "laplacian"


def _kernel(x: np.ndarray, y: np.ndarray, kernel: str, sigma: float) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    if kernel == GAUSSIAN:
        return np.exp(-(diff**2).sum(axis=2) / (2.0 * sigma**2))
    if kernel == LAPLACIAN:
        return np.exp(-np.abs(diff).sum(axis=2) / sigma)
    raise ValueError(f"unknown kernel {kernel!r}")


def mmd_squared(x_samples, y_samples, kernel: str = GAUSSIAN, sigma: float = 1.0) -> float:
    """Biased (V-statistic) estimate of MMD^2, clamped at zero.

    ``gaussian`` uses exp(-|x - y|^2 / (2 sigma^2)); ``laplacian`` uses
    exp(-|x - y|_1 / sigma).
    """
    x = np.atleast_2d(np.asarray(x_samples, dtype=float))
    y = np.atleast_2d(np.asarray(y_samples, dtype=float))
    if x.size == 0 or y.size == 0:
        raise ValueError("both sample sets must be non-empty")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"sample arity mismatch: {x.shape[1]} vs {y.shape[1]}")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    kxx = _kernel(x, x, kernel, sigma).mean()
    kyy = _kernel(y, y, kernel, sigma).mean()
    kxy = _kernel(x, y, kernel, sigma).mean()
    return max(0.0, float(kxx + kyy - 2.0 * kxy))


@dataclass(frozen=True, eq=False)
class DivergenceReport:
    per_state: np.ndarray  # NaN for states absent from the dataset
    weights: np.ndarray
    aggregate: float
    sigma: float
    samples_per_state: int


def _state_stream(seed: int, policy_row: np.ndarray, behavior_row: np.ndarray) -> np.random.Generator:
    # keyed on the rows, not the state id, so relabelling states leaves every draw unchanged
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    h.update(np.ascontiguousarray(policy_row, dtype=float).tobytes())
    h.update(np.ascontiguousarray(behavior_row, dtype=float).tobytes())
    return np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))


def policy_divergence_report(
    model: LearnedModel,
    behavior: BehaviorEstimate,
    sigma: float = 1.0,
    samples_per_state: int = 64,
    seed: int = 0,
    stochastic: bool = False,
) -> DivergenceReport:
    """Per-state MMD^2 between learned-policy and behavior action samples.

    Actions are one-hot encoded. The aggregate weights each seen state by its
    dataset visitation count.
    """
    pi = model.action_probs(stochastic=stochastic)
    beta = behavior.probs
    n_s = behavior.state_counts
    eye = np.eye(pi.shape[1])
    per_state = np.full(pi.shape[0], np.nan)
    for s in np.flatnonzero(n_s > 0):
        rng = _state_stream(seed, pi[s], beta[s])
        xs = rng.choice(pi.shape[1], size=samples_per_state, p=pi[s])
        ys = rng.choice(pi.shape[1], size=samples_per_state, p=beta[s])
        per_state[s] = mmd_squared(eye[xs], eye[ys], GAUSSIAN, sigma)
    seen = n_s > 0
    total = math.fsum(n_s[seen])
    aggregate = math.fsum(n_s[seen] * per_state[seen]) / total if total > 0 else 0.0
    return DivergenceReport(per_state, n_s.copy(), aggregate, sigma, samples_per_state)
