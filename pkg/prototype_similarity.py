import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from sklearn.metrics.pairwise import cosine_similarity as _pairwise_cosine

from core_data import LabelSet, as_matrix, row_softmax
from errors import RareClassUndefinedError, SingularPrototypeError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """Per-class mean embeddings; rows of classes without instances are zero and invalid."""
    vectors: np.ndarray  # C x D
    valid: np.ndarray  # C booleans
    counts: np.ndarray  # instances per class
    class_ids: np.ndarray  # original class index of each row

    @property
    def num_classes(self) -> int:
        return int(self.vectors.shape[0])

    def invalid_classes(self) -> np.ndarray:
        return self.class_ids[~self.valid]

    def drop_invalid(self) -> Tuple["PrototypeSet", np.ndarray]:
        """Drop masked classes and reindex; returns the new set and the kept class ids."""
        keep = np.flatnonzero(self.valid)
        kept_ids = self.class_ids[keep]
        if keep.size < self.num_classes:
            logger.info("prototypes_dropped | dropped=%s", self.invalid_classes().tolist())
        return PrototypeSet(self.vectors[keep], self.valid[keep], self.counts[keep], kept_ids), kept_ids


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    raw: np.ndarray
    modulated: Optional[np.ndarray] = None
    gamma: Optional[float] = None

    @property
    def num_classes(self) -> int:
        return int(self.raw.shape[0])


def compute_prototypes(embeddings: np.ndarray, labels: LabelSet) -> PrototypeSet:
    embeddings = as_matrix(embeddings, "embeddings")
    if embeddings.shape[0] != len(labels):
        raise ValidationError(
            f"{embeddings.shape[0]} embeddings but {len(labels)} labels"
        )
    if embeddings.shape[1] < 1:
        raise ValidationError("embeddings need at least one dimension")

    sums = np.zeros((labels.num_classes, embeddings.shape[1]))
    np.add.at(sums, labels.labels, embeddings)
    counts = labels.counts
    vectors = np.zeros_like(sums)
    present = counts > 0
    vectors[present] = sums[present] / counts[present, None]
    valid = present & (np.linalg.norm(vectors, axis=1) > 0)
    vectors[~valid] = 0.0

    if not valid.all():
        logger.warning(
            "prototypes_masked | classes=%s", np.flatnonzero(~valid).tolist()
        )
    return PrototypeSet(vectors, valid, counts.copy(), np.arange(labels.num_classes))


def cosine_similarity(protos: PrototypeSet) -> SimilarityMatrix:
    for row in range(protos.num_classes):
        class_id = int(protos.class_ids[row])
        if not protos.valid[row]:
            if protos.counts[row] == 0:
                raise SingularPrototypeError(class_id, "no instances; drop masked classes first")
            raise SingularPrototypeError(class_id)
        if not np.any(protos.vectors[row]):
            raise SingularPrototypeError(class_id)

    sim = _pairwise_cosine(protos.vectors)
    sim = np.clip((sim + sim.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    sim.setflags(write=False)
    return SimilarityMatrix(raw=sim)


def modulate_similarity(sim: SimilarityMatrix, counts, gamma: float) -> SimilarityMatrix:
    """Frequency-modulated row softmax: exp(S_ij / N_j^gamma) normalised per row."""
    if not gamma >= 0:
        raise ValidationError(f"gamma must be >= 0, got {gamma}")
    counts = np.asarray(counts)
    if counts.shape != (sim.num_classes,):
        raise ValidationError(
            f"expected {sim.num_classes} class counts, got shape {counts.shape}"
        )
    zero = np.flatnonzero(counts <= 0)
    if zero.size:
        raise RareClassUndefinedError(int(zero[0]))

    scale = np.power(counts.astype(np.float64), gamma)
    modulated = row_softmax(sim.raw / scale[None, :])
    modulated.setflags(write=False)
    logger.debug("similarity_modulated | classes=%d | gamma=%s", sim.num_classes, gamma)
    return SimilarityMatrix(raw=sim.raw, modulated=modulated, gamma=float(gamma))


def class_similarity(embeddings: np.ndarray, labels: LabelSet, gamma: float) -> SimilarityMatrix:
    """Prototypes, cosine similarity and modulation in one call."""
    protos = compute_prototypes(embeddings, labels)
    return modulate_similarity(cosine_similarity(protos), protos.counts, gamma)
