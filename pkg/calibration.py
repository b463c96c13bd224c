"""Reliability statistics, ECE and the per-class signed calibration error.

The signed error of class i is

    delta_i = sum_b (N_ib / N_i) * (acc_ib - conf_ib)

so a negative value means the model is overconfident on class i.
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Optional

import numpy as np
import pandas as pd

from core_data import LabelSet, as_soft_labels, parse_choice
from errors import ValidationError

logger = logging.getLogger(__name__)


class Grouping(str, Enum):
    PREDICTED_CLASS = "predicted-class"
    TRUE_CLASS = "true-class"


@dataclass(frozen=True)
class BinningConfig:
    """Equal-width bins: [0, 1/B] then ((b-1)/B, b/B]."""
    num_bins: int = 10

    def __post_init__(self):
        if int(self.num_bins) < 1:
            raise ValidationError(f"num_bins must be >= 1, got {self.num_bins}")

    def assign(self, confidences: np.ndarray) -> np.ndarray:
        """Zero-based bin index of each confidence."""
        inner_edges = np.arange(1, self.num_bins) / self.num_bins
        return np.digitize(confidences, inner_edges, right=True)


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    grouping: Grouping
    num_bins: int
    counts: np.ndarray  # C x B
    acc: np.ndarray  # C x B, NaN for empty bins
    conf: np.ndarray  # C x B, NaN for empty bins
    delta: Optional[np.ndarray] = None
    ece: Optional[float] = None

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def class_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def unobserved(self) -> np.ndarray:
        return np.flatnonzero(self.class_counts == 0)

    def bins_frame(self) -> pd.DataFrame:
        """One row per (class, bin), bins numbered from 1."""
        rows = []
        for class_index in range(self.num_classes):
            for b in range(self.num_bins):
                count = int(self.counts[class_index, b])
                rows.append({
                    'class': class_index,
                    'bin': b + 1,
                    'count': count,
                    'acc': float(self.acc[class_index, b]) if count else None,
                    'conf': float(self.conf[class_index, b]) if count else None,
                })
        return pd.DataFrame(rows, columns=['class', 'bin', 'count', 'acc', 'conf'])

    def to_dict(self) -> Dict:
        delta = self.delta if self.delta is not None else ccece(self)
        return {
            'grouping': self.grouping.value,
            'num_bins': int(self.num_bins),
            'ece': None if self.ece is None else float(self.ece),
            'delta': [float(d) for d in delta],
            'unobserved': [int(i) for i in self.unobserved],
            'bins': [
                {key: None if isinstance(value, float) and np.isnan(value) else value for key, value in record.items()}
                for record in self.bins_frame().to_dict(orient='records')
            ],
        }


def _validated(scores: np.ndarray, labels: LabelSet) -> np.ndarray:
    scores = as_soft_labels(scores, "scores")
    if scores.shape[0] != len(labels):
        raise ValidationError(f"{scores.shape[0]} score rows but {len(labels)} labels")
    if scores.shape[1] != labels.num_classes:
        raise ValidationError(
            f"scores have {scores.shape[1]} classes, labels have {labels.num_classes}"
        )
    return scores


def _bin_statistics(groups, confidences, correct, num_groups: int, cfg: BinningConfig):
    bins = cfg.assign(confidences)
    key = groups * cfg.num_bins + bins
    size = num_groups * cfg.num_bins
    counts = np.bincount(key, minlength=size).reshape(num_groups, cfg.num_bins)
    acc_sum = np.bincount(key, weights=correct, minlength=size).reshape(num_groups, cfg.num_bins)
    conf_sum = np.bincount(key, weights=confidences, minlength=size).reshape(num_groups, cfg.num_bins)
    with np.errstate(invalid='ignore', divide='ignore'):
        acc = np.where(counts > 0, acc_sum / counts, np.nan)
        conf = np.where(counts > 0, conf_sum / counts, np.nan)
    return counts, acc, conf


def reliability_bins(
        scores: np.ndarray,
        labels: LabelSet,
        cfg: BinningConfig = BinningConfig(),
        grouping: Grouping = Grouping.PREDICTED_CLASS
) -> CalibrationReport:
    scores = _validated(scores, labels)
    grouping = parse_choice(Grouping, grouping, "grouping")
    predicted = scores.argmax(axis=1)
    rows = np.arange(scores.shape[0])

    if grouping is Grouping.PREDICTED_CLASS:
        groups = predicted
        confidences = scores[rows, predicted]
        correct = (labels.labels == predicted).astype(np.float64)
    else:
        groups = labels.labels
        confidences = scores[rows, labels.labels]
        correct = (predicted == labels.labels).astype(np.float64)

    counts, acc, conf = _bin_statistics(groups, confidences, correct, labels.num_classes, cfg)
    return CalibrationReport(grouping, cfg.num_bins, counts, acc, conf)


def _weighted_gaps(report: CalibrationReport, absolute: bool) -> np.ndarray:
    gaps = np.nan_to_num(report.acc - report.conf)
    if absolute:
        gaps = np.abs(gaps)
    class_counts = report.class_counts
    weighted = (report.counts * gaps).sum(axis=1)
    return np.divide(weighted, class_counts, out=np.zeros(report.num_classes), where=class_counts > 0)


def ccece(report: CalibrationReport) -> np.ndarray:
    """Signed per-class calibration error; unobserved classes get 0."""
    delta = _weighted_gaps(report, absolute=False)
    if report.unobserved.size:
        logger.debug("ccece_unobserved | classes=%s", report.unobserved.tolist())
    return delta


def class_ece(report: CalibrationReport) -> np.ndarray:
    """Per-class ECE (absolute gaps over the same bins); bounds |delta_i|."""
    return _weighted_gaps(report, absolute=True)


def _aggregate_bins(scores: np.ndarray, labels: LabelSet, cfg: BinningConfig):
    predicted = scores.argmax(axis=1)
    confidences = scores.max(axis=1)
    correct = (predicted == labels.labels).astype(np.float64)
    groups = np.zeros(scores.shape[0], dtype=np.int64)
    counts, acc, conf = _bin_statistics(groups, confidences, correct, 1, cfg)
    return counts[0], acc[0], conf[0]


def ece(scores: np.ndarray, labels: LabelSet, cfg: BinningConfig = BinningConfig()) -> float:
    scores = _validated(scores, labels)
    if scores.shape[0] == 0:
        return 0.0
    counts, acc, conf = _aggregate_bins(scores, labels, cfg)
    gaps = np.abs(np.nan_to_num(acc - conf))
    return float((counts * gaps).sum() / counts.sum())


def mce(scores: np.ndarray, labels: LabelSet, cfg: BinningConfig = BinningConfig()) -> float:
    """Largest gap over occupied bins."""
    scores = _validated(scores, labels)
    if scores.shape[0] == 0:
        return 0.0
    counts, acc, conf = _aggregate_bins(scores, labels, cfg)
    return float(np.abs(acc - conf)[counts > 0].max())


def calibration_report(
        scores: np.ndarray,
        labels: LabelSet,
        cfg: BinningConfig = BinningConfig(),
        grouping: Grouping = Grouping.PREDICTED_CLASS
) -> CalibrationReport:
    """Bins, signed per-class errors and aggregate ECE together."""
    report = reliability_bins(scores, labels, cfg, grouping)
    report = replace(report, delta=ccece(report), ece=ece(scores, labels, cfg))
    logger.info(
        "calibration_report | grouping=%s | bins=%d | ece=%.6f | unobserved=%d",
        report.grouping.value, report.num_bins, report.ece, report.unobserved.size
    )
    return report
