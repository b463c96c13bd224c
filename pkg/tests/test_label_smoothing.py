import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import naive_reference as naive
from core_data import LabelSet, make_rng, one_hot
from errors import ValidationError
from label_smoothing import (
    Orientation, SmoothingConfig, SmoothingMode, smooth_similarity, smooth_targets, smooth_uniform,
)
from prototype_similarity import SimilarityMatrix, modulate_similarity


def _sim(modulated):
    modulated = np.asarray(modulated, dtype=np.float64)
    return SimilarityMatrix(raw=np.eye(len(modulated)), modulated=modulated)


def _random_modulated(rng, num_classes):
    raw = rng.uniform(-1, 1, size=(num_classes, num_classes))
    counts = rng.integers(1, 40, size=num_classes)
    return modulate_similarity(SimilarityMatrix((raw + raw.T) / 2), counts, 1.5)


def test_uniform_examples():
    np.testing.assert_allclose(smooth_uniform(np.array([[1.0, 0.0]]), 0.1), [[0.95, 0.05]])
    np.testing.assert_allclose(smooth_uniform(np.eye(4), 1.0), np.full((4, 4), 0.25))
    np.testing.assert_array_equal(smooth_uniform(np.eye(3), 0.0), np.eye(3))


def test_similarity_epsilon_zero_is_identity():
    targets = one_hot(LabelSet.from_labels([1, 0, 2]))
    out = smooth_similarity(targets, _random_modulated(make_rng(0), 3), SmoothingConfig(epsilon=0.0))
    np.testing.assert_array_equal(out, targets)


def test_similarity_epsilon_one_uniform_row():
    out = smooth_similarity(np.array([[0.0, 1.0, 0.0]]), _sim(np.full((3, 3), 1 / 3)), SmoothingConfig(epsilon=1.0))
    np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]])


def test_chained_example():
    sim = _sim([[0.7059, 0.2941], [0.2941, 0.7059]])
    out = smooth_similarity(np.array([[1.0, 0.0]]), sim, SmoothingConfig(epsilon=0.1))
    np.testing.assert_allclose(out, [[0.97059, 0.02941]], atol=1e-12)


def test_column_orientation_renormalizes():
    modulated = np.array([[0.6, 0.4], [0.1, 0.9]])
    cfg = SmoothingConfig(epsilon=0.5, orientation=Orientation.COLUMN_RENORMALIZED)
    out = smooth_similarity(np.array([[1.0, 0.0]]), _sim(modulated), cfg)
    column = np.array([0.6, 0.1]) / 0.7
    np.testing.assert_allclose(out, [[0.5 + 0.5 * column[0], 0.5 * column[1]]], atol=1e-12)


def test_rejects_soft_targets():
    with pytest.raises(ValidationError):
        smooth_uniform(np.array([[0.5, 0.5]]), 0.1)


def test_rejects_bad_epsilon():
    with pytest.raises(ValidationError):
        SmoothingConfig(epsilon=1.5)
    with pytest.raises(ValidationError):
        smooth_uniform(np.eye(2), -0.1)


def test_rejects_missing_modulation_and_mismatch():
    with pytest.raises(ValidationError):
        smooth_similarity(np.eye(2), SimilarityMatrix(np.eye(2)), SmoothingConfig())
    with pytest.raises(ValidationError):
        smooth_similarity(np.eye(3), _sim(np.full((2, 2), 0.5)), SmoothingConfig())


def test_dispatch():
    targets = np.eye(3)
    assert np.array_equal(
        smooth_targets(targets, SmoothingConfig(mode=SmoothingMode.UNIFORM)), smooth_uniform(targets, 0.1)
    )
    with pytest.raises(ValidationError):
        smooth_targets(targets, SmoothingConfig(mode="similarity"))
    with pytest.raises(ValidationError):
        SmoothingConfig(mode="confusion")


@pytest.mark.parametrize("seed", range(100))
def test_matches_naive_reference(seed):
    rng = make_rng(seed)
    num_classes = int(rng.integers(2, 9))
    labels = rng.integers(0, num_classes, size=int(rng.integers(1, 51)))
    epsilon = float(rng.uniform())
    sim = _random_modulated(rng, num_classes)
    targets = one_hot(LabelSet(labels, num_classes))

    out = smooth_similarity(targets, sim, SmoothingConfig(epsilon=epsilon))
    expected = naive.smooth_row(labels.tolist(), sim.modulated.tolist(), epsilon)
    np.testing.assert_allclose(out, expected, atol=1e-9, rtol=0)

    expected = naive.smooth_uniform(labels.tolist(), num_classes, epsilon)
    np.testing.assert_allclose(smooth_uniform(targets, epsilon), expected, atol=1e-9, rtol=0)


@settings(max_examples=80, deadline=None)
@given(
    st.integers(0, 10 ** 6),
    st.floats(0.0, 1.0),
    st.sampled_from(list(Orientation)),
)
def test_outputs_are_distributions(seed, epsilon, orientation):
    rng = make_rng(seed)
    num_classes = int(rng.integers(2, 9))
    labels = rng.integers(0, num_classes, size=10)
    out = smooth_similarity(
        one_hot(LabelSet(labels, num_classes)),
        _random_modulated(rng, num_classes),
        SmoothingConfig(epsilon=epsilon, orientation=orientation),
    )
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_true_class_keeps_majority(seed):
    rng = make_rng(seed)
    num_classes = int(rng.integers(2, 9))
    labels = rng.integers(0, num_classes, size=20)
    out = smooth_similarity(
        one_hot(LabelSet(labels, num_classes)), _random_modulated(rng, num_classes), SmoothingConfig(epsilon=0.1)
    )
    assert (out[np.arange(20), labels] >= 0.9).all()
    assert (out.argmax(axis=1) == labels).all()


def test_affine_in_epsilon():
    rng = make_rng(5)
    targets = one_hot(LabelSet(rng.integers(0, 4, size=8), 4))
    sim = _random_modulated(rng, 4)
    at = {e: smooth_similarity(targets, sim, SmoothingConfig(epsilon=e)) for e in (0.0, 0.5, 1.0)}
    np.testing.assert_allclose(at[0.5], 0.5 * (at[0.0] + at[1.0]), atol=1e-12)


def test_uniform_matrix_matches_uniform_smoothing():
    targets = one_hot(LabelSet.from_labels([0, 3, 1, 2]))
    out = smooth_similarity(targets, _sim(np.full((4, 4), 0.25)), SmoothingConfig(epsilon=0.3))
    np.testing.assert_allclose(out, smooth_uniform(targets, 0.3), atol=1e-12)
