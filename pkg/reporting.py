"""JSON and CSV rendering for calibration reports and ablation tables.

JSON output is deterministic: keys keep insertion order, floats are written
with 17 significant digits and absent values are ``null``.
"""
import dataclasses
import json
import logging
import math
import sys
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from distill_harness import ExperimentConfig, ExperimentResult, Variant
from errors import NumericalError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '.17g'
METRICS = ['accuracy', 'rare_accuracy', 'ece_teacher', 'ece_student']


def format_float(value: float) -> str:
    if not math.isfinite(value):
        raise NumericalError(f"cannot render non-finite value {value!r} as JSON")
    text = format(value, FLOAT_FORMAT)
    if '.' not in text and 'e' not in text:
        text += '.0'
    return text


def _render(value, indent: int, level: int) -> str:
    pad = ' ' * (indent * (level + 1))
    close = ' ' * (indent * level)

    if value is None:
        return 'null'
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, Enum):
        return json.dumps(value.value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(float(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, dict):
        if not value:
            return '{}'
        items = [f"{pad}{json.dumps(str(key))}: {_render(item, indent, level + 1)}" for key, item in value.items()]
        return '{\n' + ',\n'.join(items) + f'\n{close}}}'
    if isinstance(value, (list, tuple)):
        if not value:
            return '[]'
        # flat numeric lists stay on one line
        if all(not isinstance(item, (dict, list, tuple, np.ndarray)) for item in value):
            return '[' + ', '.join(_render(item, indent, level + 1) for item in value) + ']'
        items = [pad + _render(item, indent, level + 1) for item in value]
        return '[\n' + ',\n'.join(items) + f'\n{close}]'
    raise TypeError(f"cannot render {type(value).__name__} as JSON")


def render_json(obj, indent: int = 2) -> str:
    return _render(obj, indent, 0) + '\n'


def write_json(obj, path: Optional[Union[str, Path]] = None) -> None:
    """Write to `path`, or standard output when no path is given."""
    text = render_json(obj)
    if path is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(text)
    logger.debug("json_written | path=%s | bytes=%d", path, len(text))


def _optional(value) -> Optional[float]:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return float(value)


class AblationReport:
    def __init__(self, results: Sequence[ExperimentResult]):
        self.results = list(results)

    def results_frame(self) -> pd.DataFrame:
        records = []
        for result in self.results:
            record = result.to_record()
            record.pop('per_class_accuracy')
            records.append(record)
        frame = pd.DataFrame(records, columns=['variant', 'label_fraction', 'seed'] + METRICS)
        return frame.astype({metric: float for metric in METRICS})

    def summary_frame(self) -> pd.DataFrame:
        """Mean and population standard deviation over seeds per variant and fraction."""
        frame = self.results_frame()
        if frame.empty:
            return pd.DataFrame(columns=['variant', 'label_fraction', 'runs'])
        grouped = frame.groupby(['variant', 'label_fraction'], sort=False)
        summary = grouped[METRICS].agg(['mean', lambda column: column.std(ddof=0)])
        summary.columns = [f"{metric}_{'mean' if stat == 'mean' else 'std'}" for metric, stat in summary.columns]
        summary.insert(0, 'runs', grouped.size())
        return summary.reset_index()

    def _rare_means(self) -> pd.DataFrame:
        """variant x label_fraction table of mean rare-class accuracy."""
        frame = self.results_frame()
        return frame.pivot_table(
            index='variant', columns='label_fraction', values='rare_accuracy', aggfunc='mean', sort=False
        )

    def semisupervised_ordering(self) -> List[Dict]:
        """Rare accuracy: onehot <= soft <= soft+correction, with correction strictly above onehot."""
        names = [Variant.SEMISUP_ONEHOT.value, Variant.SEMISUP_SOFT.value, Variant.SEMISUP_SOFT_CORRECTION.value]
        means = self._rare_means()
        if not set(names) <= set(means.index):
            return []
        checks = []
        for fraction in means.columns:
            onehot, soft, corrected = (_optional(means.at[name, fraction]) for name in names)
            if None in (onehot, soft, corrected):
                continue
            checks.append({
                'label_fraction': float(fraction),
                'semisup_onehot': onehot,
                'semisup_soft': soft,
                'semisup_soft_correction': corrected,
                'holds': onehot <= soft <= corrected and corrected > onehot,
            })
        return checks

    def similarity_smoothing_gap(self) -> Optional[Dict]:
        """Similarity smoothing beats both baselines on rare classes; its lead over
        one-hot training is widest with the fewest labels."""
        names = [
            Variant.SUPERVISED_SIMILARITY.value, Variant.SUPERVISED_UNIFORM.value, Variant.SUPERVISED_ONEHOT.value
        ]
        means = self._rare_means()
        if not set(names) <= set(means.index):
            return None
        fractions = sorted(means.columns)
        per_fraction, over_onehot = [], {}
        for fraction in fractions:
            similarity, uniform, onehot = (_optional(means.at[name, fraction]) for name in names)
            if None in (similarity, uniform, onehot):
                continue
            gap = similarity - max(uniform, onehot)
            over_onehot[fraction] = similarity - onehot
            per_fraction.append({
                'label_fraction': float(fraction),
                'gap': gap,
                'margin_over_uniform': similarity - uniform,
                'margin_over_onehot': over_onehot[fraction],
                'holds': gap >= 0,
            })
        largest_at_smallest = None
        if over_onehot and fractions[0] in over_onehot:
            largest_at_smallest = over_onehot[fractions[0]] == max(over_onehot.values())
        return {'per_fraction': per_fraction, 'largest_gap_at_smallest_fraction': largest_at_smallest}

    def student_calibration(self, min_share: float = 0.8) -> List[Dict]:
        """Seeds where the corrected student's ECE falls below the teacher's."""
        frame = self.results_frame()
        frame = frame[frame['variant'] == Variant.SEMISUP_SOFT_CORRECTION.value]
        checks = []
        for fraction, group in frame.groupby('label_fraction', sort=False):
            improved = int((group['ece_student'] < group['ece_teacher']).sum())
            checks.append({
                'label_fraction': float(fraction),
                'seeds_improved': improved,
                'seeds': int(group.shape[0]),
                'holds': improved >= math.ceil(min_share * group.shape[0]),
            })
        return checks

    def direction_checks(self) -> Dict:
        return {
            'semisupervised_ordering': self.semisupervised_ordering(),
            'similarity_smoothing_gap': self.similarity_smoothing_gap(),
            'student_calibration': self.student_calibration(),
        }

    def summary_records(self) -> List[Dict]:
        records = self.summary_frame().to_dict(orient='records')
        return [
            {key: _optional(value) if isinstance(value, float) else value for key, value in record.items()}
            for record in records
        ]

    def to_dict(self, cfg: ExperimentConfig) -> Dict:
        return {
            'spec': dataclasses.asdict(cfg.dataset),
            'config': cfg.to_dict(),
            'results': [result.to_record() for result in self.results],
            'summary': self.summary_records(),
            'checks': self.direction_checks(),
        }

    def write_csv(self, path: Union[str, Path]) -> None:
        """One row per run with per-class accuracy flattened to class_<i> columns."""
        frame = self.results_frame()
        if self.results:
            per_class = np.vstack([result.metrics.per_class_accuracy for result in self.results])
            columns = [f"class_{i}" for i in range(per_class.shape[1])]
            frame = pd.concat([frame, pd.DataFrame(per_class, columns=columns)], axis=1)
        frame.to_csv(path, index=False, float_format='%.17g', lineterminator='\n', na_rep='')
        logger.info("ablation_csv_written | path=%s | rows=%d", path, frame.shape[0])
