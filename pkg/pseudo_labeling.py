import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from sklearn.metrics.pairwise import cosine_similarity as _pairwise_cosine

from core_data import as_matrix, as_soft_labels, parse_choice
from errors import ValidationError

logger = logging.getLogger(__name__)


class Repair(str, Enum):
    CLAMP_RENORMALIZE = "clamp-renormalize"
    NONE = "none"


@dataclass(frozen=True)
class CorrectionConfig:
    lambda_: float = 2.0
    repair: Repair = Repair.CLAMP_RENORMALIZE

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lambda_}")
        object.__setattr__(self, "repair", parse_choice(Repair, self.repair, "repair"))


@dataclass(frozen=True, eq=False)
class CorrectionResult:
    values: np.ndarray
    fallback: np.ndarray  # rows whose clamped sum was zero; teacher row returned


@dataclass(frozen=True, eq=False)
class PseudoLabelBatch:
    corrected: np.ndarray
    keep_mask: np.ndarray
    threshold: float

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep_mask)

    def kept(self) -> np.ndarray:
        return self.corrected[self.keep_mask]


def apply_correction(teacher_scores: np.ndarray, delta, cfg: CorrectionConfig) -> CorrectionResult:
    """Add lambda * delta to every row, then repair per cfg.repair."""
    teacher_scores = as_soft_labels(teacher_scores, "teacher scores")
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (teacher_scores.shape[1],):
        raise ValidationError(
            f"delta has shape {delta.shape}, expected ({teacher_scores.shape[1]},)"
        )

    fallback = np.zeros(teacher_scores.shape[0], dtype=bool)
    if cfg.lambda_ == 0 or not delta.any():
        return CorrectionResult(teacher_scores, fallback)

    raw = teacher_scores + cfg.lambda_ * delta[None, :]
    if cfg.repair is Repair.NONE:
        return CorrectionResult(raw, fallback)

    clamped = np.clip(raw, 0.0, 1.0)
    sums = clamped.sum(axis=1, keepdims=True)
    fallback = sums[:, 0] <= 0.0
    corrected = np.where(fallback[:, None], teacher_scores, clamped / np.where(sums > 0, sums, 1.0))
    if fallback.any():
        logger.warning("correction_fallback | rows=%d", int(fallback.sum()))
    corrected.setflags(write=False)
    return CorrectionResult(corrected, fallback)


def correct_pseudo_labels(teacher_scores: np.ndarray, delta, cfg: CorrectionConfig = CorrectionConfig()) -> np.ndarray:
    """Corrected pseudo-label rows with the default renormalize repair."""
    return apply_correction(teacher_scores, delta, cfg).values


def filter_by_confidence(batch: np.ndarray, tau: float) -> PseudoLabelBatch:
    """Keep rows whose top probability is at least tau; the boundary is inclusive."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {tau}")
    batch = as_soft_labels(batch, "pseudo-labels")
    if batch.shape[0]:
        keep = batch.max(axis=1) >= tau
    else:
        keep = np.zeros(0, dtype=bool)
    logger.debug("pseudo_labels_filtered | kept=%d | total=%d | tau=%s", int(keep.sum()), keep.size, tau)
    return PseudoLabelBatch(batch, keep, float(tau))


def _check_nonzero_rows(matrix: np.ndarray, name: str):
    zero = np.flatnonzero(~np.any(matrix != 0.0, axis=1))
    if zero.size:
        raise ValidationError(f"{name} row {zero[0]} has zero norm")


def nearest_neighbors(pool: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Q x k pool indices by descending cosine similarity, ties to the lower index."""
    pool = as_matrix(pool, "pool")
    queries = as_matrix(queries, "queries")
    if pool.shape[1] != queries.shape[1]:
        raise ValidationError(
            f"pool has dimension {pool.shape[1]}, queries have {queries.shape[1]}"
        )
    if not 1 <= k <= pool.shape[0]:
        raise ValidationError(f"k must lie in [1, {pool.shape[0]}], got {k}")
    _check_nonzero_rows(pool, "pool")
    _check_nonzero_rows(queries, "query")

    similarity = _pairwise_cosine(queries, pool)
    order = np.arange(pool.shape[0])
    neighbors = np.empty((queries.shape[0], k), dtype=np.int64)
    for q, row in enumerate(similarity):
        # lexsort keys: last is primary
        neighbors[q] = np.lexsort((order, -row))[:k]
    return neighbors


def retrieve_unlabeled(pool: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Union of every query's k nearest pool rows, duplicates removed in first-seen order."""
    neighbors = nearest_neighbors(pool, queries, k)
    retrieved = pd.unique(neighbors.ravel())
    logger.info(
        "unlabeled_retrieved | queries=%d | k=%d | unique=%d",
        neighbors.shape[0], k, retrieved.size
    )
    return np.asarray(retrieved, dtype=np.int64)
