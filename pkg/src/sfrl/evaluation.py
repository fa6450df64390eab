"""Policy rollouts and the filtered-vs-unfiltered comparison experiment."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import Dataset, atomic_write_text
from .envs import DiscreteMDP, MixSpec, generate_dataset, make_env
from .filtering import (
    ABSOLUTE_POWER,
    AVERAGE_DISCOUNTED,
    AVERAGE_REWARD,
    DegenerateDatasetError,
    ScoreCriterion,
    filter_dataset,
)
from .learners import BC, EXPECTILE, SUPPORT, LearnedModel, LearnerConfig, train_with_checkpoints

log = logging.getLogger(__name__)

NO_FILTER = "none"
OK, DEGENERATE = "OK", "DEGENERATE"
BUDGET_SWEEPS, BUDGET_UPDATES = "sweeps", "updates"

COLUMNS = (
    "algorithm",
    "criterion",
    "seed",
    "checkpoint",
    "status",
    "mean_return",
    "std_return",
    "dataset_size_transitions",
    "dataset_episodes",
    "fallback_steps",
    "support_violations",
)
SUMMARY_COLUMNS = (
    "algorithm",
    "criterion",
    "checkpoint",
    "n_ok",
    "n_degenerate",
    "mean_return",
    "std_across_seeds",
    "mean_dataset_size",
)


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 100
    gamma_eval: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        if not 0.0 <= self.gamma_eval <= 1.0:
            raise ValueError("gamma_eval must be in [0, 1]")


@dataclass(frozen=True)
class RolloutResult:
    mean: float
    std: float
    per_episode: tuple[float, ...]
    fallback_steps: int


def _as_actor(policy, n_states: int):
    """Normalise a model, (S,) action table or (S, A) probability table to act(s, rng)."""
    if isinstance(policy, LearnedModel):
        policy = policy.policy
    table = np.asarray(policy)
    if table.ndim == 1:
        if table.shape[0] != n_states:
            raise ValueError("policy table does not match the environment")
        return lambda s, rng: int(table[s])
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0
    return lambda s, rng: int(np.searchsorted(cdf[s], rng.random(), side="right"))


def rollout_return(m: DiscreteMDP, policy, cfg: EvalConfig) -> RolloutResult:
    """Monte-Carlo estimate of the discounted return sum_t gamma_eval^t r_t.

    States the policy has no action for (``-1``, i.e. unseen in the training
    data) fall back to action 0; every such step is counted.
    """
    act = _as_actor(policy, m.n_states)
    rng = np.random.default_rng(cfg.seed)
    returns = []
    fallbacks = 0
    for _ in range(cfg.n_episodes):
        s = m.reset(rng)
        g, discount = 0.0, 1.0
        for _ in range(m.horizon):
            a = act(s, rng)
            if a < 0:
                a = 0
                fallbacks += 1
            s, r, term = m.step(s, a, rng)
            g += discount * r
            discount *= cfg.gamma_eval
            if term:
                break
        returns.append(g)
    arr = np.array(returns)
    return RolloutResult(float(arr.mean()), float(arr.std()), tuple(returns), fallbacks)


def support_violations(model: LearnedModel) -> int:
    """Number of dataset states whose chosen action never appears there in the data."""
    seen_states = np.flatnonzero(model.state_counts > 0)
    pi = model.policy[seen_states]
    bad = (pi < 0) | (model.counts[seen_states, np.maximum(pi, 0)] <= 0)
    return int(bad.sum())


def default_learners() -> tuple[LearnerConfig, ...]:
    return tuple(LearnerConfig(algorithm=a) for a in (SUPPORT, BC, EXPECTILE))


@dataclass(frozen=True)
class ExperimentPlan:
    env: str = "gridworld"
    env_params: dict = field(default_factory=lambda: {"n": 5, "slip": 0.1})
    mix: tuple[int, int, int] = (50, 30, 20)
    dataset_seed: int = 0
    epsilon: float = 0.1
    training_fraction: float = 0.3
    learners: tuple[LearnerConfig, ...] = field(default_factory=default_learners)
    criteria: tuple[str, ...] = (NO_FILTER, AVERAGE_REWARD, AVERAGE_DISCOUNTED)
    criterion_gamma: float = 0.99
    discount_mode: str = ABSOLUTE_POWER
    n_seeds: int = 5
    checkpoints: tuple[int, ...] = (5, 10, 25, 50, 100)
    eval: EvalConfig = field(default_factory=EvalConfig)
    budget: str = BUDGET_SWEEPS

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if not self.checkpoints or list(self.checkpoints) != sorted(set(self.checkpoints)):
            raise ValueError("checkpoints must be non-empty, strictly ascending")
        if self.checkpoints[0] < 1:
            raise ValueError("checkpoints must be >= 1")
        if self.budget not in (BUDGET_SWEEPS, BUDGET_UPDATES):
            raise ValueError(f"budget must be {BUDGET_SWEEPS!r} or {BUDGET_UPDATES!r}")
        for c in self.criteria:
            if c not in (NO_FILTER, AVERAGE_REWARD, AVERAGE_DISCOUNTED):
                raise ValueError(f"unknown criterion {c!r}")
        MixSpec(*self.mix)

    def make_env(self) -> DiscreteMDP:
        return make_env(self.env, **self.env_params)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mix"] = list(self.mix)
        out["criteria"] = list(self.criteria)
        out["checkpoints"] = list(self.checkpoints)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentPlan":
        raw = dict(raw)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown plan fields: {sorted(unknown)}")
        if "learners" in raw:
            raw["learners"] = tuple(
                LearnerConfig(algorithm=x) if isinstance(x, str) else LearnerConfig(**x)
                for x in raw["learners"]
            )
        if "eval" in raw:
            raw["eval"] = EvalConfig(**raw["eval"])
        for key in ("mix", "criteria", "checkpoints"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def load_plan(path: str | os.PathLike) -> ExperimentPlan:
    with open(path, encoding="utf-8") as fh:
        return ExperimentPlan.from_dict(json.load(fh))


@dataclass(frozen=True)
class ResultRow:
    algorithm: str
    criterion: str
    seed: int
    checkpoint: int
    status: str
    mean_return: float | None
    std_return: float | None
    dataset_size_transitions: int
    dataset_episodes: int
    fallback_steps: int
    support_violations: int


@dataclass(frozen=True)
class ResultTable:
    rows: tuple[ResultRow, ...]
    meta: dict = field(default_factory=dict)

    def select(self, **where) -> list[ResultRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in where.items())]


def _criterion(plan: ExperimentPlan, name: str) -> ScoreCriterion:
    return ScoreCriterion(name, plan.criterion_gamma, plan.discount_mode)


def _evaluate_cell(plan, m, data: Dataset, cfg: LearnerConfig, criterion: str, seed_idx: int, scale: int):
    epochs = plan.checkpoints[-1] * scale
    cfg = replace(cfg, epochs=epochs)
    models = train_with_checkpoints(data, cfg, [c * scale for c in plan.checkpoints])
    eval_cfg = replace(plan.eval, seed=plan.eval.seed + seed_idx)
    rows = []
    for c in plan.checkpoints:
        model = models[c * scale]
        res = rollout_return(m, model, eval_cfg)
        rows.append(
            ResultRow(
                cfg.algorithm, criterion, seed_idx, c, OK, res.mean, res.std,
                data.n_transitions, len(data.episodes), res.fallback_steps, support_violations(model),
            )
        )
    return rows


def run_experiment(plan: ExperimentPlan) -> ResultTable:
    """Train every learner on unfiltered and filtered data for every seed.

    Each seed generates one dataset; all criteria and learners share it and
    share the evaluation stream. Under the default ``sweeps`` budget filtered
    runs make the same number of passes over their (smaller) dataset; under
    ``updates`` the pass count is scaled up to match the unfiltered run.
    """
    m = plan.make_env()
    rows: list[ResultRow] = []
    for seed_idx in range(plan.n_seeds):
        ds_seed = plan.dataset_seed + seed_idx
        mix = MixSpec(*plan.mix, shuffle_seed=ds_seed)
        base = generate_dataset(m, mix, ds_seed, plan.epsilon, plan.training_fraction)
        for crit in plan.criteria:
            if crit == NO_FILTER:
                data = base
            else:
                try:
                    data, _ = filter_dataset(base, _criterion(plan, crit))
                except DegenerateDatasetError as exc:
                    log.warning("seed %d criterion %s: %s", seed_idx, crit, exc)
                    for cfg in plan.learners:
                        for c in plan.checkpoints:
                            rows.append(
                                ResultRow(cfg.algorithm, crit, seed_idx, c, DEGENERATE, None, None,
                                          0, 0, 0, 0)
                            )
                    continue
            scale = 1
            if plan.budget == BUDGET_UPDATES:
                scale = max(1, math.ceil(base.n_transitions / data.n_transitions))
            for cfg in plan.learners:
                rows.extend(_evaluate_cell(plan, m, data, cfg, crit, seed_idx, scale))
    meta = {
        "env": m.env_id,
        "gamma_train": ",".join(sorted({repr(c.gamma) for c in plan.learners})),
        "gamma_eval": repr(plan.eval.gamma_eval),
        "budget": plan.budget,
        "discount_mode": plan.discount_mode,
        "criterion_gamma": repr(plan.criterion_gamma),
    }
    return ResultTable(tuple(rows), meta)


# -- CSV ----------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def summarize(t: ResultTable) -> list[dict]:
    """Per (algorithm, criterion) statistics at the final checkpoint."""
    if not t.rows:
        return []
    final = max(r.checkpoint for r in t.rows)
    keys = []
    for r in t.rows:
        if (r.algorithm, r.criterion) not in keys:
            keys.append((r.algorithm, r.criterion))
    out = []
    for alg, crit in keys:
        cell = [r for r in t.rows if r.algorithm == alg and r.criterion == crit and r.checkpoint == final]
        ok = [r for r in cell if r.status == OK]
        returns = np.array([r.mean_return for r in ok], dtype=float)
        out.append(
            {
                "algorithm": alg,
                "criterion": crit,
                "checkpoint": final,
                "n_ok": len(ok),
                "n_degenerate": len(cell) - len(ok),
                "mean_return": float(returns.mean()) if ok else None,
                "std_across_seeds": float(returns.std()) if ok else None,
                "mean_dataset_size": float(np.mean([r.dataset_size_transitions for r in ok])) if ok else None,
            }
        )
    return out


def results_to_text(t: ResultTable) -> str:
    buf = io.StringIO()
    meta = "; ".join(f"{k}={v}" for k, v in sorted(t.meta.items()))
    buf.write(f"# sfrl results v1; {meta}\n" if meta else "# sfrl results v1\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in t.rows:
        writer.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    summary = summarize(t)
    if summary:
        buf.write("#summary\n")
        writer.writerow(SUMMARY_COLUMNS)
        for s in summary:
            writer.writerow([_fmt(s[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def emit_results(t: ResultTable, path: str | os.PathLike) -> None:
    atomic_write_text(path, results_to_text(t))


def _parse_opt_float(x: str) -> float | None:
    return None if x == "" else float(x)


def results_from_text(text: str) -> tuple[ResultTable, list[dict]]:
    lines = text.split("\n")
    meta = {}
    if lines and lines[0].startswith("# sfrl results"):
        for part in lines[0].split(";")[1:]:
            k, _, v = part.strip().partition("=")
            meta[k] = v
        lines = lines[1:]
    if "#summary" in lines:
        cut = lines.index("#summary")
        main, tail = lines[:cut], lines[cut + 1:]
    else:
        main, tail = lines, []
    rows = []
    for rec in csv.DictReader(main):
        rows.append(
            ResultRow(
                rec["algorithm"], rec["criterion"], int(rec["seed"]), int(rec["checkpoint"]), rec["status"],
                _parse_opt_float(rec["mean_return"]), _parse_opt_float(rec["std_return"]),
                int(rec["dataset_size_transitions"]), int(rec["dataset_episodes"]),
                int(rec["fallback_steps"]), int(rec["support_violations"]),
            )
        )
    summary = []
    for rec in csv.DictReader(tail):
        summary.append(
            {
                "algorithm": rec["algorithm"],
                "criterion": rec["criterion"],
                "checkpoint": int(rec["checkpoint"]),
                "n_ok": int(rec["n_ok"]),
                "n_degenerate": int(rec["n_degenerate"]),
                "mean_return": _parse_opt_float(rec["mean_return"]),
                "std_across_seeds": _parse_opt_float(rec["std_across_seeds"]),
                "mean_dataset_size": _parse_opt_float(rec["mean_dataset_size"]),
            }
        )
    return ResultTable(tuple(rows), meta), summary


def read_results(path: str | os.PathLike) -> tuple[ResultTable, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        return results_from_text(fh.read())
