import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import naive_reference as naive
from core_data import make_rng, row_softmax
from errors import ValidationError
from pseudo_labeling import (
    CorrectionConfig, Repair, apply_correction, correct_pseudo_labels, filter_by_confidence, nearest_neighbors,
    retrieve_unlabeled,
)


def test_correction_example():
    out = correct_pseudo_labels(np.array([[0.8, 0.2]]), [-0.15, 0.05], CorrectionConfig(lambda_=2.0))
    np.testing.assert_allclose(out, [[0.625, 0.375]], atol=1e-12)


def test_raw_mode_returns_unrepaired_values():
    out = correct_pseudo_labels(np.array([[0.8, 0.2]]), [-0.15, 0.05], CorrectionConfig(2.0, Repair.NONE))
    np.testing.assert_allclose(out, [[0.5, 0.3]], atol=1e-12)


def test_identities():
    scores = row_softmax(make_rng(0).standard_normal((6, 4)))
    np.testing.assert_array_equal(correct_pseudo_labels(scores, [0.1, -0.2, 0.0, 0.3], CorrectionConfig(0.0)), scores)
    np.testing.assert_array_equal(correct_pseudo_labels(scores, np.zeros(4), CorrectionConfig(5.0)), scores)


def test_fallback_row_returns_teacher_scores():
    scores = np.array([[0.5, 0.5], [0.9, 0.1]])
    result = apply_correction(scores, [-0.6, -0.6], CorrectionConfig(1.0))
    # row 0 clamps to zero everywhere, row 1 keeps some mass
    assert result.fallback.tolist() == [True, False]
    np.testing.assert_array_equal(result.values[0], [0.5, 0.5])
    np.testing.assert_allclose(result.values[1], [1.0, 0.0])


def test_correction_errors():
    with pytest.raises(ValidationError):
        CorrectionConfig(lambda_=-1.0)
    with pytest.raises(ValidationError):
        correct_pseudo_labels(np.array([[0.5, 0.5]]), [0.1, 0.1, 0.1])


@pytest.mark.parametrize("seed", range(100))
def test_correction_matches_naive_reference(seed):
    rng = make_rng(seed)
    num_classes = int(rng.integers(2, 9))
    scores = row_softmax(rng.standard_normal((int(rng.integers(1, 51)), num_classes)) * 2)
    delta = rng.uniform(-0.3, 0.3, size=num_classes)
    lam = float(rng.uniform(0, 4))
    out = correct_pseudo_labels(scores, delta, CorrectionConfig(lam))
    np.testing.assert_allclose(out, naive.correct(scores.tolist(), delta.tolist(), lam), atol=1e-9, rtol=0)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.01, 5.0))
def test_corrected_rows_are_distributions_and_shift_mass(seed, lam):
    rng = make_rng(seed)
    scores = row_softmax(rng.standard_normal((20, 5)))
    delta = rng.uniform(-0.2, 0.2, size=5)
    delta[0] = -abs(delta[0]) - 0.01
    delta[1] = abs(delta[1])
    result = apply_correction(scores, delta, CorrectionConfig(lam))
    out = result.values
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    # overconfident class 0 loses ground against class 1 wherever both keep mass
    rows = ~result.fallback & (out[:, 1] > 0) & (out[:, 0] > 0)
    before = scores[rows, 0] / scores[rows, 1]
    after = out[rows, 0] / out[rows, 1]
    assert (after <= before * (1 + 1e-12)).all()


def test_filter_boundary_inclusive():
    batch = filter_by_confidence(np.array([[0.9, 0.1], [0.4, 0.6], [0.5, 0.5]]), 0.5)
    assert batch.keep_mask.tolist() == [True, True, True]
    batch = filter_by_confidence(np.array([[0.9, 0.05, 0.05], [0.4, 0.3, 0.3], [0.5, 0.25, 0.25]]), 0.5)
    assert batch.keep_mask.tolist() == [True, False, True]
    assert batch.kept_indices().tolist() == [0, 2]
    np.testing.assert_array_equal(batch.kept(), [[0.9, 0.05, 0.05], [0.5, 0.25, 0.25]])


def test_filter_extremes():
    scores = np.array([[1.0, 0.0], [0.7, 0.3]])
    assert filter_by_confidence(scores, 0.0).keep_mask.all()
    assert filter_by_confidence(scores, 1.0).keep_mask.tolist() == [True, False]
    with pytest.raises(ValidationError):
        filter_by_confidence(scores, 1.2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_keep_count_non_increasing_in_threshold(seed):
    scores = row_softmax(make_rng(seed).standard_normal((40, 4)) * 2)
    kept = [filter_by_confidence(scores, tau).keep_mask.sum() for tau in np.linspace(0, 1, 11)]
    assert all(a >= b for a, b in zip(kept, kept[1:]))


def test_retrieve_exact_match():
    pool = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert retrieve_unlabeled(pool, np.array([[0.0, 2.0]]), 1).tolist() == [1]


def test_retrieve_all_sorted_by_similarity():
    pool = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert retrieve_unlabeled(pool, np.array([[1.0, 0.2]]), 3).tolist() == [0, 2, 1]


def test_retrieve_dedups_shared_neighbor():
    pool = np.array([[1.0, 0.0], [0.0, 1.0]])
    queries = np.array([[1.0, 0.1], [1.0, -0.1]])
    assert retrieve_unlabeled(pool, queries, 1).tolist() == [0]


def test_ties_go_to_lower_index():
    pool = np.array([[2.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert nearest_neighbors(pool, np.array([[1.0, 0.0]]), 2).tolist() == [[0, 1]]


def test_retrieve_errors():
    pool = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValidationError):
        retrieve_unlabeled(pool, np.array([[1.0, 0.0]]), 3)
    with pytest.raises(ValidationError):
        retrieve_unlabeled(pool, np.array([[0.0, 0.0]]), 1)
    with pytest.raises(ValidationError):
        retrieve_unlabeled(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 0.0]]), 1)
    with pytest.raises(ValidationError):
        retrieve_unlabeled(pool, np.array([[1.0, 0.0, 0.0]]), 1)


@pytest.mark.parametrize("seed", range(50))
def test_retrieve_matches_brute_force(seed):
    rng = make_rng(seed)
    dim = int(rng.integers(1, 9))
    pool = rng.standard_normal((int(rng.integers(1, 201)), dim))
    queries = rng.standard_normal((int(rng.integers(1, 11)), dim))
    k = int(rng.integers(1, pool.shape[0] + 1))
    expected = naive.retrieve(pool.tolist(), queries.tolist(), k)
    assert retrieve_unlabeled(pool, queries, k).tolist() == expected
