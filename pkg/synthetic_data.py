import logging
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from core_data import LabelSet, make_rng
from errors import ValidationError

logger = logging.getLogger(__name__)

# independent RNG streams per seed
CENTERS_STREAM = 0
SUBSAMPLE_STREAM = 100


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 20
    zipf_exponent: float = 1.5
    total_labeled: int = 2000
    total_unlabeled: int = 4000
    dim: int = 16
    cluster_spread: float = 0.6
    class_center_scale: float = 4.0
    similar_pair_angle: float = 60.0  # degrees between paired head/tail centers
    test_per_class: int = 200
    validation_fraction: float = 0.15
    rare_threshold: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.total_labeled < self.num_classes:
            raise ValidationError(
                f"total_labeled={self.total_labeled} cannot give each of "
                f"{self.num_classes} classes a labeled instance"
            )
        if self.rare_threshold < 1:
            raise ValidationError(f"rare_threshold must be >= 1, got {self.rare_threshold}")
        if self.dim < 1 or self.total_unlabeled < 0 or self.test_per_class < 1:
            raise ValidationError("dim and test_per_class must be positive, total_unlabeled nonnegative")
        if self.cluster_spread <= 0 or self.class_center_scale <= 0:
            raise ValidationError("cluster_spread and class_center_scale must be positive")
        if self.zipf_exponent < 0:
            raise ValidationError(f"zipf_exponent must be >= 0, got {self.zipf_exponent}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValidationError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    train_x: np.ndarray
    train_labels: LabelSet
    val_x: np.ndarray
    val_labels: LabelSet
    unlabeled_x: np.ndarray
    unlabeled_labels: LabelSet  # hidden ground truth, analysis only
    test_x: np.ndarray
    test_labels: LabelSet
    centers: np.ndarray
    rare_classes: np.ndarray


class LongTailDataGenerator:
    def __init__(self, spec: SyntheticDatasetSpec):
        self.spec = spec

        # Zipf class distribution, class 0 largest
        ranks = np.arange(1, spec.num_classes + 1, dtype=np.float64)
        weights = ranks ** -spec.zipf_exponent
        self.CLASS_DISTRIBUTION = weights / weights.sum()

    def class_sizes(self, total: int, at_least_one: bool = True) -> np.ndarray:
        """Largest-remainder allocation of `total` instances over the Zipf distribution."""
        exact = total * self.CLASS_DISTRIBUTION
        sizes = np.floor(exact).astype(np.int64)
        remainder = int(total - sizes.sum())
        classes = np.arange(self.spec.num_classes)
        order = np.lexsort((classes, -(exact - sizes)))
        sizes[order[:remainder]] += 1

        if at_least_one:
            missing = int((sizes == 0).sum())
            sizes[sizes == 0] = 1
            for _ in range(missing):
                sizes[np.argmax(sizes)] -= 1
        return sizes

    def class_centers(self, rng: np.random.Generator) -> np.ndarray:
        """Head classes on orthonormal axes; tail class t leans toward head C-1-t.

        Each tail direction is cos(angle) along its partner head axis plus
        sin(angle) along a random unit vector in the span no head uses, so a
        tail is confusable with exactly one head. Without room for that frame
        (dim <= number of heads) the heads are random unit directions and each
        tail is rotated toward its partner instead.
        """
        num_classes, dim = self.spec.num_classes, self.spec.dim
        heads = (num_classes + 1) // 2
        angle = np.deg2rad(self.spec.similar_pair_angle)
        if dim > heads:
            return self.spec.class_center_scale * self._frame_directions(rng, heads, angle)

        directions = rng.standard_normal((num_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        if dim > 1:
            for tail in range(heads, num_classes):
                head = num_classes - 1 - tail
                u = directions[head]
                v = directions[tail] - (directions[tail] @ u) * u
                norm = np.linalg.norm(v)
                if norm == 0:
                    continue
                directions[tail] = np.cos(angle) * u + np.sin(angle) * (v / norm)
        return self.spec.class_center_scale * directions

    def _frame_directions(self, rng: np.random.Generator, heads: int, angle: float) -> np.ndarray:
        num_classes, dim = self.spec.num_classes, self.spec.dim
        basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0].T
        directions = np.empty((num_classes, dim))
        directions[:heads] = basis[:heads]
        for tail in range(heads, num_classes):
            coefficients = rng.standard_normal(dim - heads)
            away = (coefficients / np.linalg.norm(coefficients)) @ basis[heads:]
            directions[tail] = np.cos(angle) * basis[num_classes - 1 - tail] + np.sin(angle) * away
        return directions

    def sample(self, rng: np.random.Generator, centers: np.ndarray, labels: np.ndarray) -> np.ndarray:
        noise = rng.standard_normal((labels.shape[0], self.spec.dim))
        return centers[labels] + self.spec.cluster_spread * noise

    def split_validation(
            self,
            labels: np.ndarray,
            rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Per-class held-out split; every class keeps at least one training instance."""
        train_idx, val_idx = [], []
        for class_index in range(self.spec.num_classes):
            members = rng.permutation(np.flatnonzero(labels == class_index))
            held_out = min(int(np.floor(self.spec.validation_fraction * members.size)), members.size - 1)
            val_idx.append(members[:held_out])
            train_idx.append(members[held_out:])
        return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))

    def generate(self) -> SyntheticDataset:
        spec = self.spec
        rng = make_rng(spec.seed, CENTERS_STREAM)
        centers = self.class_centers(rng)

        labeled_sizes = self.class_sizes(spec.total_labeled)
        labeled = np.repeat(np.arange(spec.num_classes), labeled_sizes)
        labeled_x = self.sample(rng, centers, labeled)

        unlabeled = rng.choice(spec.num_classes, size=spec.total_unlabeled, p=self.CLASS_DISTRIBUTION)
        unlabeled_x = self.sample(rng, centers, unlabeled)

        test = np.repeat(np.arange(spec.num_classes), spec.test_per_class)
        test_x = self.sample(rng, centers, test)

        train_idx, val_idx = self.split_validation(labeled, rng)
        train_labels = LabelSet(labeled[train_idx], spec.num_classes)
        rare = np.flatnonzero(train_labels.counts <= spec.rare_threshold)

        logger.info(
            "synthetic_generated | seed=%d | train=%d | val=%d | unlabeled=%d | test=%d | rare=%s",
            spec.seed, train_idx.size, val_idx.size, unlabeled.size, test.size, rare.tolist()
        )
        return SyntheticDataset(
            train_x=labeled_x[train_idx],
            train_labels=train_labels,
            val_x=labeled_x[val_idx],
            val_labels=LabelSet(labeled[val_idx], spec.num_classes),
            unlabeled_x=unlabeled_x,
            unlabeled_labels=LabelSet(unlabeled, spec.num_classes),
            test_x=test_x,
            test_labels=LabelSet(test, spec.num_classes),
            centers=centers,
            rare_classes=rare,
        )


def generate_synthetic(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    return LongTailDataGenerator(spec).generate()


def subsample_labeled(dataset: SyntheticDataset, fraction: float, rng: np.random.Generator) -> SyntheticDataset:
    """Keep `fraction` of each class's training instances (at least one); 1.0 is a no-op."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"label fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset

    labels = dataset.train_labels.labels
    kept = []
    for class_index in range(dataset.train_labels.num_classes):
        members = np.flatnonzero(labels == class_index)
        if members.size == 0:
            continue
        count = max(1, int(round(fraction * members.size)))
        kept.append(rng.permutation(members)[:count])
    kept = np.sort(np.concatenate(kept))
    return replace(
        dataset,
        train_x=dataset.train_x[kept],
        train_labels=dataset.train_labels.subset(kept),
    )
