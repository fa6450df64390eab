"""Episode-level sample filtering for offline RL datasets, with tabular policy-constraint learners."""

__version__ = "0.1.0"

from .dataset import (
    Dataset,
    DatasetError,
    EnvSpec,
    Episode,
    Transition,
    load_dataset,
    save_dataset,
    segment_episodes,
    validate_dataset,
)
from .filtering import (
    DegenerateDatasetError,
    FilterReport,
    ScoreCriterion,
    apply_filter,
    filter_dataset,
    partition,
    score_dataset,
    score_episode,
)

__all__ = [
    "Dataset",
    "DatasetError",
    "DegenerateDatasetError",
    "EnvSpec",
    "Episode",
    "FilterReport",
    "ScoreCriterion",
    "Transition",
    "apply_filter",
    "filter_dataset",
    "load_dataset",
    "partition",
    "save_dataset",
    "score_dataset",
    "score_episode",
    "segment_episodes",
    "validate_dataset",
]
