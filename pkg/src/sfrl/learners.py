"""Tabular policy-constraint offline learners.

Three desk-scale ports of neural offline RL algorithms, all trained by
fitted-Q sweeps over the dataset in stored order:

* ``support``   -- Bellman backups maximise only over actions seen at the next
  state; the greedy policy is restricted to seen actions (BEAR stand-in, with
  the divergence bound taken at its strictest support-only limit).
* ``bc``        -- same critic; the policy maximises ``lam * Q + log pi_beta``
  with the TD3+BC normalisation ``lam = alpha / mean|Q|``.
* ``expectile`` -- V(s) is an expectile of Q over dataset actions and Q
  regresses onto ``r + gamma * V(s')`` (IQL stand-in); the policy is the
  argmax advantage over seen actions.

None of these are the neural originals; each model records which port it is.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Dataset, atomic_write_text, fingerprint

SUPPORT, BC, EXPECTILE = "support", "bc", "expectile"
ALGORITHMS = (SUPPORT, BC, EXPECTILE)
CONVERGENCE_TOL = 1e-9

PORT_NOTES = {
    SUPPORT: "tabular port of BEAR: support-constrained fitted Q-iteration; "
    "the divergence bound is enforced at its strictest (support) limit and MMD is a post-hoc diagnostic only",
    BC: "tabular port of TD3+BC: support-constrained fitted Q-iteration, "
    "policy = argmax over seen actions of lambda*Q + log pi_beta with lambda = alpha / mean|Q|",
    EXPECTILE: "tabular port of IQL: expectile value backup, "
    "policy = argmax advantage over seen actions; AWR weights exp(temperature * A) reported",
}


@dataclass(frozen=True)
class LearnerConfig:
    algorithm: str = SUPPORT
    gamma: float = 0.99
    epochs: int = 500
    batch_size: int = 256
    learning_rate: float = 1.0
    alpha: float = 2.5
    expectile_tau: float = 0.7
    awr_temperature: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        for name in ("gamma", "learning_rate", "alpha", "expectile_tau", "awr_temperature"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 < self.expectile_tau < 1.0:
            raise ValueError("expectile_tau must be in (0, 1)")
        if self.awr_temperature <= 0:
            raise ValueError("awr_temperature must be > 0")


# -- primitives ---------------------------------------------------------------


def bellman_target(r, v_next, gamma, terminal):
    """One-step target: ``r`` on terminal transitions, else ``r + gamma * v_next``.

    Timeouts are not terminal, so they bootstrap. Works on scalars or arrays.
    """
    if np.ndim(r) == 0 and np.ndim(terminal) == 0 and np.ndim(v_next) == 0:
        return float(r) if terminal else float(r + gamma * v_next)
    r = np.asarray(r, dtype=float)
    v_next = np.where(terminal, 0.0, v_next)
    return np.where(terminal, r, r + gamma * v_next)


def expectile_rows(values: np.ndarray, weights: np.ndarray, tau: float) -> np.ndarray:
    """Weighted tau-expectile of every row, solved exactly.

    The first-order condition ``tau * sum_{x>=v} w (x - v) = (1 - tau) * sum_{x<v} w (v - x)``
    is piecewise linear in v with breakpoints at the row values, so the root is
    found by locating its segment and solving the linear piece. Rows with zero
    total weight return 0.
    """
    x = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    live = w > 0
    has_data = live.any(axis=1)
    # g at every breakpoint v = x[:, k]: (rows, k, j)
    diff = x[:, None, :] - x[:, :, None]
    wj = w[:, None, :]
    g = tau * (wj * np.maximum(diff, 0.0)).sum(axis=2) - (1.0 - tau) * (wj * np.maximum(-diff, 0.0)).sum(axis=2)
    # largest live breakpoint where g >= 0 (g is decreasing in v)
    ok = live & (g >= 0)
    cand = np.where(ok, x, -np.inf)
    k = np.argmax(cand, axis=1)
    no_ok = ~ok.any(axis=1)
    if np.any(no_ok & has_data):
        # rounding put g(min) marginally below zero; anchor at the row minimum
        k = np.where(no_ok, np.argmin(np.where(live, x, np.inf), axis=1), k)
    rows = np.arange(len(x))
    xk = x[rows, k][:, None]
    lo = live & (x <= xk)
    hi = live & (x > xk)
    # on [x_k, next breakpoint) g falls linearly with slope -(tau w_hi + (1 - tau) w_lo)
    denom = tau * (w * hi).sum(axis=1) + (1.0 - tau) * (w * lo).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = xk[:, 0] + np.maximum(g[rows, k], 0.0) / denom
    upper = np.where(hi, x, np.inf).min(axis=1)
    v = np.clip(v, xk[:, 0], upper)
    return np.where(has_data, v, 0.0)


def expectile(values, tau: float, weights=None) -> float:
    """The tau-expectile of a non-empty list: argmin_v sum |tau - 1[x < v]| (x - v)^2."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("expectile of an empty list")
    if not np.all(np.isfinite(x)):
        raise ValueError("expectile values must be finite")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float).ravel()
    return float(expectile_rows(x[None, :], w[None, :], tau)[0])


# -- dataset tabulation -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BehaviorEstimate:
    """Empirical behavior policy N(s, a) / N(s)."""

    counts: np.ndarray

    @classmethod
    def from_dataset(cls, d: Dataset) -> "BehaviorEstimate":
        return cls(_Tabular.from_dataset(d).counts)

    @property
    def state_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def support(self) -> np.ndarray:
        return self.counts > 0

    @property
    def probs(self) -> np.ndarray:
        n = self.state_counts[:, None]
        return np.divide(self.counts, n, out=np.zeros_like(self.counts, dtype=float), where=n > 0)


@dataclass(frozen=True, eq=False)
class _Tabular:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    terminal: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_dataset(cls, d: Dataset) -> "_Tabular":
        spec = d.env_spec
        if not spec.is_discrete:
            raise ValueError("tabular learners need a discrete env spec")
        rows = [(t.state, t.action, t.reward, t.next_state, t.terminal) for t in d.transitions()]
        if not rows:
            raise ValueError("cannot train on an empty dataset")
        s, a, r, s2, term = (np.array(col) for col in zip(*rows))
        counts = np.zeros((spec.state_size, spec.action_size))
        np.add.at(counts, (s, a), 1.0)
        return cls(s.astype(np.intp), a.astype(np.intp), r.astype(float), s2.astype(np.intp), term.astype(bool), counts)


def _masked_argmax(scores: np.ndarray, seen: np.ndarray) -> np.ndarray:
    """Row argmax over seen actions (lowest id on ties); -1 where nothing is seen."""
    masked = np.where(seen, scores, -np.inf)
    policy = np.argmax(masked, axis=1)
    return np.where(seen.any(axis=1), policy, -1)


def _support_max(q: np.ndarray, seen: np.ndarray) -> np.ndarray:
    return np.where(seen.any(axis=1), np.where(seen, q, -np.inf).max(axis=1), 0.0)


# -- model --------------------------------------------------------------------


@dataclass(eq=False)
class LearnedModel:
    algorithm: str
    config: LearnerConfig
    q_table: np.ndarray
    counts: np.ndarray
    policy: np.ndarray
    v_table: np.ndarray | None = None
    action_weights: np.ndarray | None = None
    bc_lambda: float | None = None
    epochs_run: int = 0
    converged: bool = False
    dataset_id: str = ""
    env_id: str = ""
    notes: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def state_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def behavior(self) -> BehaviorEstimate:
        return BehaviorEstimate(self.counts)

    def act(self, s: int) -> int:
        return int(self.policy[s])

    def action_probs(self, stochastic: bool = False) -> np.ndarray:
        """(S, A) action distribution; rows of unseen states are all zero."""
        if stochastic and self.action_weights is not None:
            return self.action_weights.copy()
        probs = np.zeros_like(self.q_table)
        seen = self.policy >= 0
        probs[np.flatnonzero(seen), self.policy[seen]] = 1.0
        return probs


# -- training -----------------------------------------------------------------


def _fit(data: _Tabular, cfg: LearnerConfig, next_value, checkpoints=()):
    """Fitted-Q sweeps in stored order; returns (q, epochs_run, converged, snapshots).

    Each mini-batch computes targets from the table as it stood at the start of
    the batch and moves every touched cell by ``lr / N(s, a)`` times its summed
    TD error, so one full-batch sweep with lr = 1 is an exact fitted-Q step.
    """
    q = np.zeros_like(data.counts)
    step = np.divide(cfg.learning_rate, data.counts, out=np.zeros_like(data.counts), where=data.counts > 0)
    n = len(data.s)
    wanted = sorted(set(checkpoints))
    snapshots = {}
    converged = False
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        q_prev = q.copy()
        for start in range(0, n, cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            s, a = data.s[sl], data.a[sl]
            v_next = next_value(q)[data.s2[sl]]
            td = bellman_target(data.r[sl], v_next, cfg.gamma, data.terminal[sl]) - q[s, a]
            delta = np.zeros_like(q)
            np.add.at(delta, (s, a), td)
            q += step * delta
        if epoch in wanted:
            snapshots[epoch] = q.copy()
        if np.max(np.abs(q - q_prev)) < CONVERGENCE_TOL:
            converged = True
            break
    for c in wanted:
        if c not in snapshots and c >= epoch:
            snapshots[c] = q.copy()
    return q, epoch, converged, snapshots


def _build_model(cfg: LearnerConfig, data: _Tabular, q: np.ndarray, d: Dataset, epochs_run: int, converged: bool) -> LearnedModel:
    seen = data.counts > 0
    model = LearnedModel(
        algorithm=cfg.algorithm,
        config=cfg,
        q_table=q,
        counts=data.counts,
        policy=_masked_argmax(q, seen),
        epochs_run=epochs_run,
        converged=converged,
        dataset_id=fingerprint(d),
        env_id=d.env_spec.env_id,
        notes=PORT_NOTES[cfg.algorithm],
    )
    if cfg.algorithm == BC:
        mean_abs_q = float(np.mean(np.abs(q[data.s, data.a])))
        lam = cfg.alpha / mean_abs_q if mean_abs_q > 0 else 0.0
        with np.errstate(divide="ignore"):
            log_beta = np.log(BehaviorEstimate(data.counts).probs)
        model.policy = _masked_argmax(lam * q + log_beta, seen)
        model.bc_lambda = lam
    elif cfg.algorithm == EXPECTILE:
        v = expectile_rows(q, data.counts, cfg.expectile_tau)
        adv = q - v[:, None]
        model.v_table = v
        model.policy = _masked_argmax(adv, seen)
        logits = np.where(seen, cfg.awr_temperature * adv, -np.inf)
        top = np.where(seen.any(axis=1), logits.max(axis=1), 0.0)
        weights = np.where(seen, np.exp(logits - top[:, None]), 0.0)
        total = weights.sum(axis=1, keepdims=True)
        model.action_weights = np.divide(weights, total, out=np.zeros_like(weights), where=total > 0)
    return model


def train_with_checkpoints(d: Dataset, cfg: LearnerConfig, checkpoints) -> dict[int, LearnedModel]:
    """Train once and return a model for each requested epoch count.

    Checkpoints past early convergence reuse the converged table.
    """
    data = _Tabular.from_dataset(d)
    seen = data.counts > 0
    if cfg.algorithm == EXPECTILE:
        def next_value(q):
            return expectile_rows(q, data.counts, cfg.expectile_tau)
    else:
        def next_value(q):
            return _support_max(q, seen)

    checkpoints = sorted(set(int(c) for c in checkpoints)) or [cfg.epochs]
    if checkpoints[0] < 1 or checkpoints[-1] > cfg.epochs:
        raise ValueError(f"checkpoints must lie in [1, {cfg.epochs}]")
    q, epochs_run, converged, snaps = _fit(data, cfg, next_value, checkpoints)
    out = {}
    for c in checkpoints:
        done = converged and c >= epochs_run
        out[c] = _build_model(cfg, data, snaps[c], d, min(c, epochs_run), done)
    return out


def _train(d: Dataset, cfg: LearnerConfig, algorithm: str) -> LearnedModel:
    if cfg.algorithm != algorithm:
        cfg = LearnerConfig(**{**asdict(cfg), "algorithm": algorithm})
    return train_with_checkpoints(d, cfg, [cfg.epochs])[cfg.epochs]


def train_support_constrained_q(d: Dataset, cfg: LearnerConfig) -> LearnedModel:
    return _train(d, cfg, SUPPORT)


def train_bc_regularized_q(d: Dataset, cfg: LearnerConfig) -> LearnedModel:
    return _train(d, cfg, BC)


def train_expectile_q(d: Dataset, cfg: LearnerConfig) -> LearnedModel:
    return _train(d, cfg, EXPECTILE)


def train(d: Dataset, cfg: LearnerConfig) -> LearnedModel:
    return _train(d, cfg, cfg.algorithm)


# -- model file ---------------------------------------------------------------


def _floats(row) -> list[float]:
    return [float(x) for x in row]


def model_to_text(model: LearnedModel) -> str:
    header = {
        "model": 1,
        "algorithm": model.algorithm,
        "config": asdict(model.config),
        "dataset": model.dataset_id,
        "env_id": model.env_id,
        "n_states": int(model.q_table.shape[0]),
        "n_actions": int(model.q_table.shape[1]),
        "epochs_run": model.epochs_run,
        "converged": model.converged,
        "bc_lambda": model.bc_lambda,
        "notes": model.notes,
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    beta = model.behavior.probs
    for s in range(model.q_table.shape[0]):
        rec = {
            "s": s,
            "q": _floats(model.q_table[s]),
            "pi": int(model.policy[s]),
            "n": [int(c) for c in model.counts[s]],
            "beta": _floats(beta[s]),
        }
        if model.v_table is not None:
            rec["v"] = float(model.v_table[s])
        if model.action_weights is not None:
            rec["w"] = _floats(model.action_weights[s])
        lines.append(json.dumps(rec, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def save_model(model: LearnedModel, path: str | os.PathLike) -> None:
    atomic_write_text(path, model_to_text(model))


def model_from_text(text: str) -> LearnedModel:
    try:
        return _model_from_text(text)
    except (KeyError, TypeError, IndexError) as exc:
        raise ValueError(f"malformed model file ({exc!r})") from None


def _model_from_text(text: str) -> LearnedModel:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    header = json.loads(lines[0])
    if not isinstance(header, dict) or header.get("model") != 1:
        raise ValueError("not a model file")
    S, A = header["n_states"], header["n_actions"]
    recs = [json.loads(ln) for ln in lines[1:]]
    if len(recs) != S:
        raise ValueError(f"model file has {len(recs)} state lines, header says {S}")
    q = np.array([r["q"] for r in recs], dtype=float).reshape(S, A)
    counts = np.array([r["n"] for r in recs], dtype=float).reshape(S, A)
    policy = np.array([r["pi"] for r in recs], dtype=np.intp)
    v = np.array([r["v"] for r in recs], dtype=float) if recs and "v" in recs[0] else None
    w = np.array([r["w"] for r in recs], dtype=float).reshape(S, A) if recs and "w" in recs[0] else None
    return LearnedModel(
        algorithm=header["algorithm"],
        config=LearnerConfig(**header["config"]),
        q_table=q,
        counts=counts,
        policy=policy,
        v_table=v,
        action_weights=w,
        bc_lambda=header.get("bc_lambda"),
        epochs_run=header.get("epochs_run", 0),
        converged=header.get("converged", False),
        dataset_id=header.get("dataset", ""),
        env_id=header.get("env_id", ""),
        notes=header.get("notes", ""),
    )


def load_model(path: str | os.PathLike) -> LearnedModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_text(fh.read())
