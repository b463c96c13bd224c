from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from core_data import as_soft_labels, parse_choice
from errors import ValidationError
from prototype_similarity import SimilarityMatrix


class SmoothingMode(str, Enum):
    UNIFORM = "uniform"
    SIMILARITY = "similarity"


class Orientation(str, Enum):
    # Use the true-class row of S'. Rows of S' are already distributions.
    ROW = "row"
    # Use the true-class column of S', renormalised to sum to one.
    COLUMN_RENORMALIZED = "column-renormalized"


@dataclass(frozen=True)
class SmoothingConfig:
    epsilon: float = 0.1
    mode: SmoothingMode = SmoothingMode.SIMILARITY
    orientation: Orientation = Orientation.ROW

    def __post_init__(self):
        _check_epsilon(self.epsilon)
        object.__setattr__(self, "mode", parse_choice(SmoothingMode, self.mode, "mode"))
        object.__setattr__(self, "orientation", parse_choice(Orientation, self.orientation, "orientation"))


def _check_epsilon(epsilon: float):
    if not 0.0 <= epsilon <= 1.0:
        raise ValidationError(f"epsilon must lie in [0, 1], got {epsilon}")


def _true_classes(targets: np.ndarray) -> np.ndarray:
    """Class index of each one-hot row."""
    targets = as_soft_labels(targets, "targets")
    is_binary = np.all((targets == 0.0) | (targets == 1.0), axis=1)
    bad = np.flatnonzero(~is_binary)
    if bad.size:
        raise ValidationError(f"targets row {bad[0]} is not one-hot")
    return targets.argmax(axis=1)


def smooth_uniform(targets: np.ndarray, epsilon: float) -> np.ndarray:
    _check_epsilon(epsilon)
    _true_classes(targets)
    num_classes = targets.shape[1]
    smoothed = (1.0 - epsilon) * np.asarray(targets) + epsilon * (1.0 / num_classes)
    smoothed.setflags(write=False)
    return smoothed


def smooth_similarity(targets: np.ndarray, sim: SimilarityMatrix, cfg: SmoothingConfig) -> np.ndarray:
    if sim.modulated is None:
        raise ValidationError("similarity smoothing needs a modulated similarity matrix")
    classes = _true_classes(targets)
    if targets.shape[1] != sim.num_classes:
        raise ValidationError(
            f"targets have {targets.shape[1]} classes, similarity matrix has {sim.num_classes}"
        )

    if cfg.orientation is Orientation.ROW:
        mixing = sim.modulated
    else:
        columns = sim.modulated.T
        mixing = columns / columns.sum(axis=1, keepdims=True)

    smoothed = (1.0 - cfg.epsilon) * np.asarray(targets) + cfg.epsilon * mixing[classes]
    smoothed.setflags(write=False)
    return smoothed


def smooth_targets(
        targets: np.ndarray,
        cfg: SmoothingConfig,
        sim: Optional[SimilarityMatrix] = None
) -> np.ndarray:
    """Dispatch on cfg.mode."""
    if cfg.mode is SmoothingMode.UNIFORM:
        return smooth_uniform(targets, cfg.epsilon)
    if sim is None:
        raise ValidationError("similarity mode requires a similarity matrix")
    return smooth_similarity(targets, sim, cfg)
