import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import naive_reference as naive
from core_data import LabelSet, make_rng
from errors import RareClassUndefinedError, SingularPrototypeError, ValidationError
from prototype_similarity import (
    PrototypeSet, SimilarityMatrix, class_similarity, compute_prototypes, cosine_similarity, modulate_similarity,
)


def _protos(vectors, counts=None):
    vectors = np.asarray(vectors, dtype=np.float64)
    counts = np.ones(len(vectors), dtype=np.int64) if counts is None else np.asarray(counts)
    valid = (counts > 0) & np.any(vectors != 0, axis=1)
    return PrototypeSet(vectors, valid, counts, np.arange(len(vectors)))


def test_hand_mean():
    protos = compute_prototypes([[1.0, 0.0], [3.0, 2.0]], LabelSet.from_labels([0, 0], 1))
    np.testing.assert_array_equal(protos.vectors, [[2.0, 1.0]])


def test_singleton_prototypes_equal_instances():
    embeddings = make_rng(1).standard_normal((3, 4))
    protos = compute_prototypes(embeddings, LabelSet.from_labels([0, 1, 2]))
    np.testing.assert_array_equal(protos.vectors, embeddings)


def test_permutation_invariance():
    rng = make_rng(2)
    embeddings = rng.standard_normal((12, 3))
    labels = rng.integers(0, 3, size=12)
    order = rng.permutation(12)
    first = compute_prototypes(embeddings, LabelSet(labels, 3))
    second = compute_prototypes(embeddings[order], LabelSet(labels[order], 3))
    np.testing.assert_allclose(first.vectors, second.vectors, atol=1e-12)


def test_empty_class_is_masked_and_dropped():
    protos = compute_prototypes([[1.0, 0.0], [0.0, 1.0]], LabelSet.from_labels([0, 2], 3))
    assert protos.valid.tolist() == [True, False, True]
    np.testing.assert_array_equal(protos.vectors[1], [0.0, 0.0])
    with pytest.raises(SingularPrototypeError) as exc:
        cosine_similarity(protos)
    assert exc.value.class_index == 1

    kept, ids = protos.drop_invalid()
    assert ids.tolist() == [0, 2]
    np.testing.assert_array_equal(cosine_similarity(kept).raw, np.eye(2))


def test_zero_norm_prototype_names_class():
    protos = compute_prototypes([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0]], LabelSet.from_labels([0, 1, 1], 2))
    with pytest.raises(SingularPrototypeError) as exc:
        cosine_similarity(protos)
    assert exc.value.class_index == 1


def test_dimension_mismatch():
    with pytest.raises(ValidationError):
        compute_prototypes([[1.0, 0.0]], LabelSet.from_labels([0, 1]))


@pytest.mark.parametrize("vectors,expected", [
    ([[1, 0], [0, 1]], 0.0),
    ([[1, 0], [2, 0]], 1.0),
    ([[1, 0], [1, 1]], 1 / math.sqrt(2)),
])
def test_cosine_examples(vectors, expected):
    sim = cosine_similarity(_protos(vectors)).raw
    assert sim[0, 1] == pytest.approx(expected, abs=1e-12)
    assert sim[0, 0] == 1.0


def test_gamma_zero_is_plain_softmax():
    raw = np.array([[1.0, 0.3], [0.3, 1.0]])
    sim = modulate_similarity(SimilarityMatrix(raw), [5, 50], 0.0)
    expected = np.exp(raw) / np.exp(raw).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(sim.modulated, expected, atol=1e-12)


def test_all_ones_similarity_is_uniform():
    sim = modulate_similarity(SimilarityMatrix(np.ones((2, 2))), [1, 1], 3.0)
    np.testing.assert_allclose(sim.modulated, 0.5)


def test_modulation_example():
    sim = modulate_similarity(SimilarityMatrix(np.array([[1.0, 0.5], [0.5, 1.0]])), [1, 4], 1.0)
    expected = math.e / (math.e + math.exp(0.125))
    assert sim.modulated[0, 0] == pytest.approx(expected, abs=1e-12)


def test_modulation_errors():
    sim = SimilarityMatrix(np.eye(2))
    with pytest.raises(RareClassUndefinedError) as exc:
        modulate_similarity(sim, [3, 0], 1.0)
    assert exc.value.class_index == 1
    with pytest.raises(ValidationError):
        modulate_similarity(sim, [3, 3], -0.5)
    with pytest.raises(ValidationError):
        modulate_similarity(sim, [3, 3], float("nan"))
    with pytest.raises(ValidationError):
        modulate_similarity(sim, [3, 3, 3], 1.0)


def test_modulation_survives_large_counts():
    raw = np.array([[1.0, 0.8], [0.8, 1.0]])
    sim = modulate_similarity(SimilarityMatrix(raw), [1, 10 ** 6], 1.5)
    assert np.isfinite(sim.modulated).all()
    np.testing.assert_allclose(sim.modulated.sum(axis=1), 1.0, atol=1e-12)


def _random_instance(seed):
    rng = make_rng(seed)
    num_classes = int(rng.integers(2, 9))
    dim = int(rng.integers(1, 5))
    n = int(rng.integers(num_classes, 51))
    labels = np.concatenate([np.arange(num_classes), rng.integers(0, num_classes, size=n - num_classes)])
    embeddings = rng.standard_normal((n, dim)) + 0.1
    gamma = float(rng.uniform(0, 3))
    return embeddings, labels, num_classes, gamma


@pytest.mark.parametrize("seed", range(100))
def test_matches_naive_reference(seed):
    embeddings, labels, num_classes, gamma = _random_instance(seed)
    expected_protos, counts = naive.prototypes(embeddings.tolist(), labels.tolist(), num_classes)
    protos = compute_prototypes(embeddings, LabelSet(labels, num_classes))
    np.testing.assert_allclose(protos.vectors, expected_protos, atol=1e-9, rtol=0)
    if not protos.valid.all():
        return

    expected_raw = naive.cosine(expected_protos)
    sim = cosine_similarity(protos)
    np.testing.assert_allclose(sim.raw, expected_raw, atol=1e-9, rtol=0)

    sim = modulate_similarity(sim, protos.counts, gamma)
    np.testing.assert_allclose(sim.modulated, naive.modulate(sim.raw.tolist(), counts, gamma), atol=1e-9, rtol=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_similarity_invariants(seed):
    embeddings, labels, num_classes, gamma = _random_instance(seed)
    protos = compute_prototypes(embeddings, LabelSet(labels, num_classes))
    sim = modulate_similarity(cosine_similarity(protos), protos.counts, gamma)
    np.testing.assert_allclose(sim.raw, sim.raw.T, atol=1e-9)
    assert sim.raw.min() >= -1.0 and sim.raw.max() <= 1.0
    np.testing.assert_array_equal(np.diag(sim.raw), 1.0)
    np.testing.assert_allclose(sim.modulated.sum(axis=1), 1.0, atol=1e-9)
    assert (sim.modulated > 0).all() and (sim.modulated < 1).all()


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0.05, 1.0),
    st.integers(1, 50),
    st.integers(1, 50),
    st.floats(0.1, 3.0),
)
def test_rare_class_receives_more_mass(s, count_j, extra, gamma):
    raw = np.array([
        [1.0, s, s],
        [s, 1.0, 0.0],
        [s, 0.0, 1.0],
    ])
    counts = [5, count_j, count_j + extra]
    modulated = modulate_similarity(SimilarityMatrix(raw), counts, gamma).modulated
    assert modulated[0, 1] > modulated[0, 2]


def test_large_gamma_flattens_rows():
    rng = make_rng(11)
    vectors = rng.standard_normal((5, 3))
    raw = cosine_similarity(_protos(vectors)).raw
    counts = rng.integers(2, 30, size=5)
    deviations = []
    for gamma in (1, 4, 16):
        modulated = modulate_similarity(SimilarityMatrix(raw), counts, gamma).modulated
        deviations.append(np.abs(modulated - 1 / 5).max())
    assert deviations[0] > deviations[1] > deviations[2]


def test_class_scale_invariance():
    rng = make_rng(4)
    embeddings = rng.standard_normal((20, 3))
    labels = np.arange(20) % 4
    scaled = embeddings.copy()
    scaled[labels == 2] *= 3.7
    before = cosine_similarity(compute_prototypes(embeddings, LabelSet(labels, 4))).raw
    after = cosine_similarity(compute_prototypes(scaled, LabelSet(labels, 4))).raw
    np.testing.assert_allclose(after[2], before[2], atol=1e-9)


def test_class_similarity_pipeline():
    embeddings = [[1.0, 0.0], [1.0, 0.1], [0.0, 1.0]]
    sim = class_similarity(embeddings, LabelSet.from_labels([0, 0, 1]), 1.5)
    assert sim.gamma == 1.5
    assert sim.modulated.shape == (2, 2)
