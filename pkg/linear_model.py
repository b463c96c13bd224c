import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from core_data import as_matrix, make_rng, row_softmax
from errors import TrainingDivergedError, ValidationError

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class LinearClassifier:
    weights: np.ndarray  # C x D
    bias: np.ndarray  # C

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise ValidationError(
                f"weights {weights.shape} and bias {bias.shape} do not describe a linear classifier"
            )
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def num_classes(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all() and np.isfinite(self.bias).all())

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "LinearClassifier":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes))

    @classmethod
    def initialize(cls, num_classes: int, dim: int, rng: np.random.Generator, scale: float = 0.01) -> "LinearClassifier":
        return cls(scale * rng.standard_normal((num_classes, dim)), np.zeros(num_classes))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    epochs: int = 100
    l2_weight: float = 1e-3
    unsup_loss_weight: float = 1.0
    ema_decay: float = 0.999
    weak_noise_sigma: float = 0.05
    strong_noise_sigma: float = 0.3
    cosine_schedule: bool = False
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.l2_weight < 0 or self.unsup_loss_weight < 0:
            raise ValidationError("l2_weight and unsup_loss_weight must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValidationError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.weak_noise_sigma < 0 or self.strong_noise_sigma < 0:
            raise ValidationError("augmentation noise levels must be >= 0")

    def learning_rate_at(self, epoch: int) -> float:
        if not self.cosine_schedule or self.epochs == 0:
            return self.learning_rate
        return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch / self.epochs))


@dataclass
class TrainingRun:
    classifier: LinearClassifier
    losses: List[float] = field(default_factory=list)


def logits(clf: LinearClassifier, x: np.ndarray) -> np.ndarray:
    """Raw class scores x W^T + b."""
    if x.shape[1] != clf.dim:
        raise ValidationError(f"inputs have dimension {x.shape[1]}, classifier expects {clf.dim}")
    return x @ clf.weights.T + clf.bias


def softmax_forward(clf: LinearClassifier, x: np.ndarray) -> np.ndarray:
    return row_softmax(logits(clf, x))


def cross_entropy_soft(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean soft-target cross-entropy and its gradient with respect to the logits."""
    if pred.shape != target.shape:
        raise ValidationError(f"prediction shape {pred.shape} != target shape {target.shape}")
    rows = pred.shape[0]
    if rows == 0:
        return 0.0, np.zeros_like(pred)
    log_pred = np.log(np.maximum(pred, PROBABILITY_FLOOR))
    loss = float(-(target * log_pred).sum() / rows)
    return loss, (pred - target) / rows


def supervised_objective(clf: LinearClassifier, x: np.ndarray, targets: np.ndarray, cfg: TrainConfig):
    loss, grad_logits = cross_entropy_soft(softmax_forward(clf, x), targets)
    grad_w = grad_logits.T @ x + cfg.l2_weight * clf.weights
    grad_b = grad_logits.sum(axis=0)
    loss += 0.5 * cfg.l2_weight * float((clf.weights ** 2).sum())
    return loss, grad_w, grad_b


def gradient_step(clf: LinearClassifier, grad_w: np.ndarray, grad_b: np.ndarray, lr: float) -> LinearClassifier:
    """One descent step; returns a new classifier."""
    return LinearClassifier(clf.weights - lr * grad_w, clf.bias - lr * grad_b)


@dataclass(frozen=True, eq=False)
class Velocity:
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros_like(cls, clf: LinearClassifier) -> "Velocity":
        return cls(np.zeros_like(clf.weights), np.zeros_like(clf.bias))


def momentum_step(
        clf: LinearClassifier,
        velocity: Velocity,
        grad_w: np.ndarray,
        grad_b: np.ndarray,
        lr: float,
        momentum: float
) -> Tuple[LinearClassifier, Velocity]:
    """Heavy-ball step: v <- momentum * v + grad, then descend along v."""
    velocity = Velocity(momentum * velocity.weights + grad_w, momentum * velocity.bias + grad_b)
    return gradient_step(clf, velocity.weights, velocity.bias, lr), velocity


def _check_finite(epoch: int, loss: float, clf: LinearClassifier):
    if not math.isfinite(loss) or not clf.is_finite():
        logger.error("training_diverged | epoch=%d | loss=%s", epoch, loss)
        raise TrainingDivergedError(epoch, loss)


def fit_supervised(
        x: np.ndarray,
        targets: np.ndarray,
        cfg: TrainConfig,
        init: Optional[LinearClassifier] = None
) -> TrainingRun:
    """Full-batch gradient descent; losses[e] is the objective before step e."""
    x = as_matrix(x, "features")
    if x.shape[0] != targets.shape[0]:
        raise ValidationError(f"{x.shape[0]} feature rows but {targets.shape[0]} target rows")
    clf = init if init is not None else initial_classifier(targets.shape[1], x.shape[1], cfg)
    run = TrainingRun(clf)
    velocity = Velocity.zeros_like(clf)

    with np.errstate(over='ignore', invalid='ignore'):
        for epoch in range(cfg.epochs):
            loss, grad_w, grad_b = supervised_objective(clf, x, targets, cfg)
            _check_finite(epoch, loss, clf)
            run.losses.append(loss)
            clf, velocity = momentum_step(clf, velocity, grad_w, grad_b, cfg.learning_rate_at(epoch), cfg.momentum)
            _check_finite(epoch, loss, clf)
            if epoch % 50 == 0:
                logger.debug("training_epoch | epoch=%d | loss=%.6f", epoch, loss)

    run.classifier = clf
    logger.info("training_done | epochs=%d | final_loss=%s", cfg.epochs, run.losses[-1] if run.losses else None)
    return run


def initial_classifier(num_classes: int, dim: int, cfg: TrainConfig) -> LinearClassifier:
    return LinearClassifier.initialize(num_classes, dim, make_rng(cfg.seed), cfg.init_scale)


def train_supervised(x: np.ndarray, targets: np.ndarray, cfg: TrainConfig) -> LinearClassifier:
    return fit_supervised(x, targets, cfg).classifier


def sharpen(clf: LinearClassifier, temperature: float) -> LinearClassifier:
    """Classifier whose logits are the original ones divided by `temperature`."""
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    if temperature == 1.0:
        return clf
    return LinearClassifier(clf.weights / temperature, clf.bias / temperature)


def ema_update(teacher: LinearClassifier, student: LinearClassifier, decay: float) -> LinearClassifier:
    """teacher <- decay * teacher + (1 - decay) * student."""
    return LinearClassifier(
        decay * teacher.weights + (1.0 - decay) * student.weights,
        decay * teacher.bias + (1.0 - decay) * student.bias,
    )
