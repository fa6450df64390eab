"""Episode scoring and above-mean sample filtering.

Each episode is scored by its average reward or its average discounted tail
reward; episodes scoring strictly above the dataset mean are kept, everything
else (ties included) is dropped, and the survivors are reassembled into a new
dataset in their original order.

The above-mean comparison is exact: average-reward scores are compared as
rationals of the stored rewards and discounted scores as the exact mean of
their float values, so equal scores always tie instead of landing on either
side of a rounded mean.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from fractions import Fraction

from .dataset import (
    Dataset,
    Episode,
    atomic_write_text,
    fingerprint,
    provenance_dict,
    provenance_text,
)

AVERAGE_REWARD = "avg"
AVERAGE_DISCOUNTED = "disc"
ABSOLUTE_POWER = "absolute"
RELATIVE_POWER = "relative"


class DegenerateDatasetError(ValueError):
    """No episode scores strictly above the mean, so no filtered dataset exists."""


@dataclass(frozen=True)
class ScoreCriterion:
    kind: str = AVERAGE_DISCOUNTED
    gamma: float = 0.99
    mode: str = ABSOLUTE_POWER

    def __post_init__(self):
        if self.kind not in (AVERAGE_REWARD, AVERAGE_DISCOUNTED):
            raise ValueError(f"unknown criterion {self.kind!r}")
        if self.mode not in (ABSOLUTE_POWER, RELATIVE_POWER):
            raise ValueError(f"unknown discounting mode {self.mode!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")

    def describe(self) -> str:
        if self.kind == AVERAGE_REWARD:
            return "avg"
        return f"disc[{self.mode},gamma={self.gamma!r}]"

    def as_dict(self) -> dict:
        return {"criterion": self.kind, "mode": self.mode, "gamma": self.gamma}


@dataclass(frozen=True)
class EpisodeScore:
    episode_index: int
    r_avg: float
    r_disc: float

    def value(self, kind: str) -> float:
        return self.r_avg if kind == AVERAGE_REWARD else self.r_disc


@dataclass(frozen=True)
class FilterReport:
    per_episode: tuple[EpisodeScore, ...]
    dataset_mean: float
    criterion: ScoreCriterion
    superior_indices: tuple[int, ...]
    inferior_indices: tuple[int, ...]
    retained_transition_count: int
    original_transition_count: int
    dataset_id: str = ""

    @property
    def retention_ratio(self) -> float:
        if self.original_transition_count == 0:
            return 0.0
        return self.retained_transition_count / self.original_transition_count

    def verdict(self, index: int) -> str:
        return "S" if index in set(self.superior_indices) else "I"


def _discount_weights(n: int, gamma: float, mode: str) -> list[float]:
    # Weight of r_h after collapsing the double sum over start index j <= h.
    if mode == ABSOLUTE_POWER:
        return [h * gamma**h for h in range(1, n + 1)]
    weights, w = [], 0.0
    for _ in range(n):
        w = gamma * w + 1.0
        weights.append(w)
    return weights


def score_episode(e: Episode, c: ScoreCriterion) -> EpisodeScore:
    """Score one episode under both the average and discounted measures.

    ``r_disc`` averages, over every start step j, the discounted tail sum of
    rewards from j to the end. In ``absolute`` mode the discount exponent is the
    1-based step index h itself; in ``relative`` mode it is h - j.
    """
    rewards = e.rewards
    n = len(rewards)
    if n == 0:
        raise ValueError(f"episode {e.index} is empty and cannot be scored")
    weights = _discount_weights(n, c.gamma, c.mode)
    r_avg = float(_exact_average(rewards))
    r_disc = math.fsum(w * r for w, r in zip(weights, rewards)) / n
    return EpisodeScore(e.index, r_avg, r_disc)


def _exact_average(rewards) -> Fraction:
    return sum(map(Fraction, rewards), Fraction(0)) / len(rewards)


def _exact_values(d: Dataset, c: ScoreCriterion, scores: list[EpisodeScore]) -> list[Fraction]:
    if c.kind == AVERAGE_REWARD:
        return [_exact_average(e.rewards) for e in d.episodes]
    return [Fraction(s.r_disc) for s in scores]


def _scores_and_exact_mean(d: Dataset, c: ScoreCriterion):
    if len(d.episodes) == 0:
        raise ValueError("cannot score an empty dataset (k = 0 episodes)")
    scores = [score_episode(e, c) for e in d.episodes]
    exact = _exact_values(d, c, scores)
    return scores, exact, sum(exact, Fraction(0)) / len(exact)


def score_dataset(d: Dataset, c: ScoreCriterion) -> tuple[list[EpisodeScore], float]:
    """Per-episode scores and the dataset mean (correctly rounded)."""
    scores, _, mean = _scores_and_exact_mean(d, c)
    return scores, float(mean)


def partition(d: Dataset, c: ScoreCriterion) -> FilterReport:
    scores, exact, mean = _scores_and_exact_mean(d, c)
    superior, inferior = [], []
    for s, v in zip(scores, exact):
        (superior if v > mean else inferior).append(s.episode_index)
    lengths = {e.index: len(e) for e in d.episodes}
    return FilterReport(
        per_episode=tuple(scores),
        dataset_mean=float(mean),
        criterion=c,
        superior_indices=tuple(superior),
        inferior_indices=tuple(inferior),
        retained_transition_count=sum(lengths[i] for i in superior),
        original_transition_count=d.n_transitions,
        dataset_id=fingerprint(d),
    )


def apply_filter(d: Dataset, report: FilterReport) -> Dataset:
    """Reassemble the superior episodes into a new dataset.

    Episodes are renumbered by their position in the output; the original
    indices are kept in the provenance under ``source_episodes``.
    """
    if len(report.per_episode) != len(d.episodes) or (
        report.original_transition_count != d.n_transitions
    ):
        raise ValueError("filter report was not produced from this dataset")
    if not report.superior_indices:
        raise DegenerateDatasetError(
            "dataset is score-degenerate: no episode scores strictly above the "
            f"dataset mean {report.dataset_mean!r} under {report.criterion.describe()}, "
            "so no filtered dataset exists"
        )
    by_index = {e.index: e for e in d.episodes}
    kept = [
        Episode(by_index[i].transitions, pos)
        for pos, i in enumerate(report.superior_indices)
    ]

    parent = provenance_dict(d.provenance)
    fields = {
        "parent_dataset": report.dataset_id or fingerprint(d),
        "parent_provenance": d.provenance,
        "filter": {
            **report.criterion.as_dict(),
            "dataset_mean": report.dataset_mean,
            "episodes_kept": len(kept),
            "episodes_total": len(d.episodes),
            "retention_ratio": report.retention_ratio,
        },
        "source_episodes": list(report.superior_indices),
    }
    sources = parent.get("episode_sources")
    if isinstance(sources, list) and len(sources) == len(d.episodes):
        fields["episode_sources"] = [sources[i] for i in report.superior_indices]
    return Dataset(tuple(kept), d.env_spec, provenance_text(fields))


def filter_dataset(d: Dataset, c: ScoreCriterion) -> tuple[Dataset, FilterReport]:
    report = partition(d, c)
    return apply_filter(d, report), report


# -- report file --------------------------------------------------------------


def report_to_text(report: FilterReport) -> str:
    c = report.criterion
    header = {
        "report": 1,
        "criterion": c.kind,
        "mode": c.mode,
        "gamma": c.gamma,
        "dataset_mean": report.dataset_mean,
        "dataset": report.dataset_id,
        "episodes": len(report.per_episode),
        "superior": len(report.superior_indices),
        "retained_transitions": report.retained_transition_count,
        "original_transitions": report.original_transition_count,
    }
    superior = set(report.superior_indices)
    lines = [json.dumps(header, separators=(",", ":"))]
    for s in report.per_episode:
        verdict = "S" if s.episode_index in superior else "I"
        lines.append(
            json.dumps(
                {"i": s.episode_index, "r_avg": s.r_avg, "r_disc": s.r_disc, "v": verdict},
                separators=(",", ":"),
            )
        )
    return "\n".join(lines) + "\n"


def write_report(report: FilterReport, path: str | os.PathLike) -> None:
    atomic_write_text(path, report_to_text(report))


def report_from_text(text: str) -> FilterReport:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise ValueError("empty report")
    header = json.loads(lines[0])
    if header.get("report") != 1:
        raise ValueError("not a filter report")
    c = ScoreCriterion(header["criterion"], header["gamma"], header["mode"])
    scores, superior, inferior = [], [], []
    for line in lines[1:]:
        rec = json.loads(line)
        scores.append(EpisodeScore(rec["i"], rec["r_avg"], rec["r_disc"]))
        (superior if rec["v"] == "S" else inferior).append(rec["i"])
    return FilterReport(
        per_episode=tuple(scores),
        dataset_mean=header["dataset_mean"],
        criterion=c,
        superior_indices=tuple(superior),
        inferior_indices=tuple(inferior),
        retained_transition_count=header["retained_transitions"],
        original_transition_count=header["original_transitions"],
        dataset_id=header.get("dataset", ""),
    )
