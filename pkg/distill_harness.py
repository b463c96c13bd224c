"""Desk-scale teacher/student simulator on synthetic long-tail data.

A linear softmax classifier stands in for the detector head. Each supervised
variant is pretrained on the labeled split; one of them (one-hot by default)
is the teacher, and students start from it and are distilled from its
sharpened pseudo-labels on noisy copies of retrieved unlabeled features.
"""
import dataclasses
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from calibration import BinningConfig, calibration_report, ece
from core_data import LabelSet, make_rng, one_hot, parse_choice
from errors import TrainingDivergedError, ValidationError
from label_smoothing import Orientation, SmoothingConfig, smooth_similarity, smooth_uniform
from linear_model import (
    LinearClassifier, TrainConfig, Velocity, cross_entropy_soft, ema_update, initial_classifier,
    momentum_step, sharpen, softmax_forward, supervised_objective, train_supervised,
)
from prototype_similarity import class_similarity
from pseudo_labeling import CorrectionConfig, correct_pseudo_labels, filter_by_confidence, retrieve_unlabeled
from synthetic_data import (
    SUBSAMPLE_STREAM, SyntheticDataset, SyntheticDatasetSpec, generate_synthetic, subsample_labeled,
)

logger = logging.getLogger(__name__)

AUGMENT_STREAM = 1


class Variant(str, Enum):
    SUPERVISED_ONEHOT = "supervised-onehot"
    SUPERVISED_UNIFORM = "supervised-uniform-smooth"
    SUPERVISED_SIMILARITY = "supervised-similarity-smooth"
    SUPERVISED_SIMILARITY_GAMMA = "supervised-similarity-smooth+gamma"
    SEMISUP_ONEHOT = "semisup-onehot"
    SEMISUP_SOFT = "semisup-soft"
    SEMISUP_SOFT_CORRECTION = "semisup-soft+correction"

    @property
    def is_supervised(self) -> bool:
        return self.value.startswith("supervised")


class PseudoLabelKind(str, Enum):
    ONEHOT = "onehot"
    SOFT = "soft"
    SOFT_CORRECTION = "soft+correction"


SEMISUP_KINDS = {
    Variant.SEMISUP_ONEHOT: PseudoLabelKind.ONEHOT,
    Variant.SEMISUP_SOFT: PseudoLabelKind.SOFT,
    Variant.SEMISUP_SOFT_CORRECTION: PseudoLabelKind.SOFT_CORRECTION,
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    epsilon: float = 0.1
    gamma: float = 1.5
    lambda_: float = 2.0
    threshold: float = 0.5
    num_bins: int = 10
    orientation: Orientation = Orientation.ROW
    label_fractions: Tuple[float, ...] = (0.05, 0.25, 1.0)
    seeds: Tuple[int, ...] = (1, 2, 3, 4, 5)
    variants: Tuple[Variant, ...] = tuple(Variant)
    teacher: Variant = Variant.SUPERVISED_ONEHOT  # pretrained model the semi-supervised variants distill from
    teacher_temperature: float = 0.3
    distill_epochs: int = 200
    min_delta_support: int = 5
    retrieval_k: int = 20
    recompute_delta: bool = False

    def __post_init__(self):
        object.__setattr__(self, "orientation", parse_choice(Orientation, self.orientation, "orientation"))
        object.__setattr__(self, "variants", tuple(parse_choice(Variant, v, "variant") for v in self.variants))
        object.__setattr__(self, "teacher", parse_choice(Variant, self.teacher, "teacher"))
        object.__setattr__(self, "label_fractions", tuple(float(f) for f in self.label_fractions))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        # constructing the sub-configs validates epsilon, lambda, bins
        self.smoothing()
        self.correction()
        self.binning()
        if self.gamma < 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError(f"threshold must lie in [0, 1], got {self.threshold}")
        if not self.label_fractions or any(not 0.0 < f <= 1.0 for f in self.label_fractions):
            raise ValidationError(f"label fractions must lie in (0, 1], got {self.label_fractions}")
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        if not self.variants:
            raise ValidationError("at least one variant is required")
        if self.retrieval_k < 0:
            raise ValidationError(f"retrieval_k must be >= 0, got {self.retrieval_k}")
        if not self.teacher.is_supervised:
            raise ValidationError(f"teacher must be a supervised variant, got {self.teacher.value}")
        if not self.teacher_temperature > 0:
            raise ValidationError(f"teacher_temperature must be > 0, got {self.teacher_temperature}")
        if self.distill_epochs < 0:
            raise ValidationError(f"distill_epochs must be >= 0, got {self.distill_epochs}")
        if self.min_delta_support < 1:
            raise ValidationError(f"min_delta_support must be >= 1, got {self.min_delta_support}")

    def smoothing(self) -> SmoothingConfig:
        return SmoothingConfig(epsilon=self.epsilon, orientation=self.orientation)

    def correction(self) -> CorrectionConfig:
        return CorrectionConfig(lambda_=self.lambda_)

    def binning(self) -> BinningConfig:
        return BinningConfig(self.num_bins)

    def to_dict(self) -> Dict:
        return {
            'epsilon': self.epsilon,
            'gamma': self.gamma,
            'lambda': self.lambda_,
            'threshold': self.threshold,
            'num_bins': self.num_bins,
            'orientation': self.orientation.value,
            'label_fractions': list(self.label_fractions),
            'seeds': list(self.seeds),
            'variants': [v.value for v in self.variants],
            'teacher': self.teacher.value,
            'teacher_temperature': self.teacher_temperature,
            'distill_epochs': self.distill_epochs,
            'min_delta_support': self.min_delta_support,
            'retrieval_k': self.retrieval_k,
            'recompute_delta': self.recompute_delta,
            'train': dataclasses.asdict(self.train),
        }


@dataclass(frozen=True, eq=False)
class EvaluationMetrics:
    accuracy: float
    per_class_accuracy: np.ndarray  # NaN for classes absent from the test set
    rare_accuracy: Optional[float]  # None when there are no rare classes
    ece: float


@dataclass
class SemiSupervisedRun:
    student: LinearClassifier
    teacher: LinearClassifier
    delta: Optional[np.ndarray]
    losses: List[float] = field(default_factory=list)
    pseudo_label_counts: List[int] = field(default_factory=list)

    @property
    def total_pseudo_labels(self) -> int:
        return int(sum(self.pseudo_label_counts))


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    variant: Variant
    label_fraction: float
    seed: int
    metrics: EvaluationMetrics
    ece_teacher: Optional[float]

    def to_record(self) -> Dict:
        return {
            'variant': self.variant.value,
            'label_fraction': self.label_fraction,
            'seed': self.seed,
            'accuracy': self.metrics.accuracy,
            'rare_accuracy': self.metrics.rare_accuracy,
            'ece_teacher': self.ece_teacher,
            'ece_student': self.metrics.ece,
            'per_class_accuracy': [
                None if np.isnan(a) else float(a) for a in self.metrics.per_class_accuracy
            ],
        }


def evaluate_scores(
        scores: np.ndarray,
        labels: LabelSet,
        rare_classes: Sequence[int],
        bins: BinningConfig = BinningConfig()
) -> EvaluationMetrics:
    predicted = scores.argmax(axis=1)
    correct = predicted == labels.labels
    hits = np.bincount(labels.labels, weights=correct.astype(np.float64), minlength=labels.num_classes)
    with np.errstate(invalid='ignore', divide='ignore'):
        per_class = np.where(labels.counts > 0, hits / labels.counts, np.nan)

    rare = np.asarray(rare_classes, dtype=np.int64)
    rare = rare[labels.counts[rare] > 0] if rare.size else rare
    rare_accuracy = float(per_class[rare].mean()) if rare.size else None
    accuracy = float(correct.mean()) if correct.size else 0.0
    return EvaluationMetrics(accuracy, per_class, rare_accuracy, ece(scores, labels, bins))


def evaluate(
        clf: LinearClassifier,
        x: np.ndarray,
        labels: LabelSet,
        rare_classes: Sequence[int],
        bins: BinningConfig = BinningConfig()
) -> EvaluationMetrics:
    return evaluate_scores(softmax_forward(clf, x), labels, rare_classes, bins)


def estimate_delta(
        teacher: LinearClassifier,
        x: np.ndarray,
        labels: LabelSet,
        bins: BinningConfig = BinningConfig(),
        min_support: int = 1
) -> np.ndarray:
    """Signed per-class calibration error of the teacher on a held-out split.

    Classes the teacher predicts fewer than `min_support` times are treated
    as unobserved and get 0.
    """
    report = calibration_report(softmax_forward(teacher, x), labels, bins)
    delta = report.delta.copy()
    sparse = report.class_counts < min_support
    delta[sparse] = 0.0
    if min_support > 1 and sparse.any():
        logger.debug("delta_sparse_classes | min_support=%d | classes=%s", min_support, np.flatnonzero(sparse).tolist())
    return delta


def _pseudo_targets(
        teacher_scores: np.ndarray,
        kind: PseudoLabelKind,
        delta: Optional[np.ndarray],
        threshold: float,
        correction: CorrectionConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Kept row indices and their targets."""
    if kind is PseudoLabelKind.SOFT_CORRECTION:
        scores = correct_pseudo_labels(teacher_scores, delta, correction)
    else:
        scores = teacher_scores
    batch = filter_by_confidence(scores, threshold)
    kept = batch.kept_indices()
    targets = batch.kept()
    if kind is PseudoLabelKind.ONEHOT:
        targets = one_hot(LabelSet(targets.argmax(axis=1), scores.shape[1]))
    return kept, targets


def train_semisupervised(
        labeled_x: np.ndarray,
        labeled_targets: np.ndarray,
        unlabeled_x: np.ndarray,
        teacher: LinearClassifier,
        kind: Union[PseudoLabelKind, str],
        cfg: TrainConfig,
        delta: Optional[np.ndarray] = None,
        threshold: float = 0.5,
        correction: CorrectionConfig = CorrectionConfig(),
        calibration_set: Optional[Tuple[np.ndarray, LabelSet, BinningConfig]] = None,
        recompute_delta: bool = False,
        temperature: float = 1.0,
        min_delta_support: int = 1,
        init: Optional[LinearClassifier] = None
) -> SemiSupervisedRun:
    """Distill a student from the teacher's pseudo-labels on augmented unlabeled data.

    Every epoch the teacher labels weakly perturbed unlabeled features, the
    pseudo-labels are (optionally) calibration-corrected and threshold
    filtered, and the student takes one full-batch step on the supervised
    loss plus the weighted pseudo-label loss on strongly perturbed features.
    The teacher then follows the student by EMA when cfg.ema_decay > 0.

    Pseudo-labels and recomputed deltas use the teacher's logits divided by
    `temperature`; the EMA acts on the raw parameters. The student starts
    from `init` when given.
    """
    kind = parse_choice(PseudoLabelKind, kind, "pseudo-label kind")
    if kind is PseudoLabelKind.SOFT_CORRECTION and delta is None:
        raise ValidationError("soft+correction pseudo-labels need a calibration delta")
    if recompute_delta and calibration_set is None:
        raise ValidationError("recomputing delta needs a calibration set")

    student = init if init is not None else initial_classifier(labeled_targets.shape[1], labeled_x.shape[1], cfg)
    velocity = Velocity.zeros_like(student)
    augment_rng = make_rng(cfg.seed, AUGMENT_STREAM)
    run = SemiSupervisedRun(student=student, teacher=teacher, delta=delta)

    with np.errstate(over='ignore', invalid='ignore'):
        for epoch in range(cfg.epochs):
            weak = unlabeled_x + cfg.weak_noise_sigma * augment_rng.standard_normal(unlabeled_x.shape)
            strong = unlabeled_x + cfg.strong_noise_sigma * augment_rng.standard_normal(unlabeled_x.shape)

            kept, pseudo = _pseudo_targets(
                softmax_forward(sharpen(run.teacher, temperature), weak), kind, run.delta, threshold, correction
            )
            run.pseudo_label_counts.append(int(kept.size))

            loss, grad_w, grad_b = supervised_objective(run.student, labeled_x, labeled_targets, cfg)
            if kept.size:
                unsup_loss, unsup_grad = cross_entropy_soft(
                    softmax_forward(run.student, strong[kept]), pseudo
                )
                loss += cfg.unsup_loss_weight * unsup_loss
                grad_w = grad_w + cfg.unsup_loss_weight * (unsup_grad.T @ strong[kept])
                grad_b = grad_b + cfg.unsup_loss_weight * unsup_grad.sum(axis=0)

            run.losses.append(loss)
            run.student, velocity = momentum_step(
                run.student, velocity, grad_w, grad_b, cfg.learning_rate_at(epoch), cfg.momentum
            )
            if not np.isfinite(loss) or not run.student.is_finite():
                raise TrainingDivergedError(epoch, loss)

            if cfg.ema_decay > 0:
                run.teacher = ema_update(run.teacher, run.student, cfg.ema_decay)
            if recompute_delta and kind is PseudoLabelKind.SOFT_CORRECTION:
                run.delta = estimate_delta(sharpen(run.teacher, temperature), *calibration_set, min_delta_support)

            if epoch % 50 == 0:
                logger.debug(
                    "distill_epoch | epoch=%d | loss=%.6f | pseudo_labels=%d", epoch, loss, kept.size
                )

    logger.info(
        "distill_done | kind=%s | epochs=%d | pseudo_labels=%d",
        kind.value, cfg.epochs, run.total_pseudo_labels
    )
    return run


def supervised_targets(
        dataset: SyntheticDataset,
        variant: Variant,
        cfg: ExperimentConfig
) -> np.ndarray:
    targets = one_hot(dataset.train_labels)
    if variant is Variant.SUPERVISED_ONEHOT:
        return targets
    if variant is Variant.SUPERVISED_UNIFORM:
        return smooth_uniform(targets, cfg.epsilon)
    gamma = cfg.gamma if variant is Variant.SUPERVISED_SIMILARITY_GAMMA else 0.0
    sim = class_similarity(dataset.train_x, dataset.train_labels, gamma)
    return smooth_similarity(targets, sim, cfg.smoothing())


def _unlabeled_features(dataset: SyntheticDataset, cfg: ExperimentConfig) -> np.ndarray:
    if cfg.retrieval_k <= 0:
        return dataset.unlabeled_x
    is_rare = np.isin(dataset.train_labels.labels, dataset.rare_classes)
    queries = dataset.train_x[is_rare]
    pool = dataset.unlabeled_x
    if queries.shape[0] == 0 or pool.shape[0] == 0:
        return pool
    indices = retrieve_unlabeled(pool, queries, min(cfg.retrieval_k, pool.shape[0]))
    return pool[indices]


def run_fraction(
        dataset: SyntheticDataset,
        cfg: ExperimentConfig,
        fraction: float,
        seed: int
) -> List[ExperimentResult]:
    """Train and evaluate every configured variant on one labeled fraction."""
    train_cfg = replace(
        cfg.train,
        seed=seed,
        weak_noise_sigma=cfg.train.weak_noise_sigma * cfg.dataset.cluster_spread,
        strong_noise_sigma=cfg.train.strong_noise_sigma * cfg.dataset.cluster_spread,
    )
    fraction_index = cfg.label_fractions.index(fraction) if fraction in cfg.label_fractions else 0
    data = subsample_labeled(dataset, fraction, make_rng(seed, SUBSAMPLE_STREAM + fraction_index))
    bins = cfg.binning()

    models: Dict[Variant, LinearClassifier] = {}
    targets: Dict[Variant, np.ndarray] = {}

    def supervised_model(variant: Variant) -> LinearClassifier:
        if variant not in models:
            targets[variant] = supervised_targets(data, variant, cfg)
            models[variant] = train_supervised(data.train_x, targets[variant], train_cfg)
        return models[variant]

    results = []
    if any(not v.is_supervised for v in cfg.variants):
        teacher = supervised_model(cfg.teacher)
        teacher_ece = evaluate(teacher, data.test_x, data.test_labels, data.rare_classes, bins).ece
        unlabeled_x = _unlabeled_features(data, cfg)
        distill_cfg = replace(train_cfg, epochs=cfg.distill_epochs)
        delta = estimate_delta(
            sharpen(teacher, cfg.teacher_temperature), data.val_x, data.val_labels, bins, cfg.min_delta_support
        )

    for variant in cfg.variants:
        if variant.is_supervised:
            clf = supervised_model(variant)
            metrics = evaluate(clf, data.test_x, data.test_labels, data.rare_classes, bins)
            results.append(ExperimentResult(variant, fraction, seed, metrics, None))
            continue

        kind = SEMISUP_KINDS[variant]
        run = train_semisupervised(
            data.train_x,
            targets[cfg.teacher],
            unlabeled_x,
            teacher,
            kind,
            distill_cfg,
            delta=delta if kind is PseudoLabelKind.SOFT_CORRECTION else None,
            threshold=cfg.threshold,
            correction=cfg.correction(),
            calibration_set=(data.val_x, data.val_labels, bins),
            recompute_delta=cfg.recompute_delta,
            temperature=cfg.teacher_temperature,
            min_delta_support=cfg.min_delta_support,
            init=teacher,
        )
        metrics = evaluate(run.student, data.test_x, data.test_labels, data.rare_classes, bins)
        results.append(ExperimentResult(variant, fraction, seed, metrics, teacher_ece))

    for result in results:
        logger.info(
            "variant_evaluated | variant=%s | fraction=%s | seed=%d | accuracy=%.4f | rare_accuracy=%s",
            result.variant.value, fraction, seed, result.metrics.accuracy, result.metrics.rare_accuracy
        )
    return results


def run_ablation(
        cfg: ExperimentConfig,
        label_fractions: Optional[Sequence[float]] = None,
        seeds: Optional[Sequence[int]] = None
) -> List[ExperimentResult]:
    """All variants x fractions x seeds, in declared order."""
    if label_fractions is not None or seeds is not None:
        cfg = replace(
            cfg,
            label_fractions=tuple(label_fractions) if label_fractions is not None else cfg.label_fractions,
            seeds=tuple(seeds) if seeds is not None else cfg.seeds,
        )
    results = []
    for seed in cfg.seeds:
        dataset = generate_synthetic(replace(cfg.dataset, seed=seed))
        for fraction in cfg.label_fractions:
            results.extend(run_fraction(dataset, cfg, fraction, seed))
    return results


# flat key=value experiment files

_LIST_FIELDS = {'label_fractions': float, 'seeds': int, 'variants': str}


def _coerce(raw: str, current):
    if isinstance(current, bool):
        lowered = raw.lower()
        if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
            raise ValidationError(f"expected a boolean, got {raw!r}")
        return lowered in ('true', '1', 'yes')
    if isinstance(current, Enum):
        return parse_choice(type(current), raw, "value")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def apply_overrides(cfg: ExperimentConfig, overrides: Dict[str, str]) -> ExperimentConfig:
    """Apply string overrides keyed by ExperimentConfig, dataset or train field names."""
    sections = {
        'dataset': {f.name for f in dataclasses.fields(SyntheticDatasetSpec)},
        'train': {f.name for f in dataclasses.fields(TrainConfig)},
    }
    top, nested = {}, {'dataset': {}, 'train': {}}
    for key, raw in overrides.items():
        name = 'lambda_' if key == 'lambda' else key
        try:
            if name == 'seed':
                top['seeds'] = (int(raw),)
            elif name in _LIST_FIELDS:
                top[name] = tuple(_LIST_FIELDS[name](v.strip()) for v in raw.split(',') if v.strip())
            elif name in sections['dataset']:
                nested['dataset'][name] = _coerce(raw, getattr(cfg.dataset, name))
            elif name in sections['train']:
                nested['train'][name] = _coerce(raw, getattr(cfg.train, name))
            elif name in {f.name for f in dataclasses.fields(ExperimentConfig)} - {'dataset', 'train'}:
                top[name] = _coerce(raw, getattr(cfg, name))
            else:
                raise ValidationError(f"unknown experiment key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"bad value for {key!r}: {exc}")
    return replace(
        cfg,
        dataset=replace(cfg.dataset, **nested['dataset']),
        train=replace(cfg.train, **nested['train']),
        **top,
    )


def load_experiment_config(path: Union[str, Path], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    overrides = {}
    with open(path, encoding='utf-8') as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ValidationError(f"{path}: line {line_number}: expected key = value")
            key, value = (part.strip() for part in line.split('=', 1))
            overrides[key] = value
    logger.info("experiment_config_loaded | path=%s | keys=%s", path, sorted(overrides))
    return apply_overrides(base or ExperimentConfig(), overrides)
