import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionprog.metrics import EvalSplit, accuracy, auc, compute_metrics, confusion_counts, macro_f1
from fusionprog.reference import naive_macro_f1, pairwise_auc


class TestAuc:
    def test_perfect_ranking(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties_is_half(self):
        assert auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            auc([0.1, 0.9], [1, 1])

    def test_non_finite_scores_rejected(self):
        with pytest.raises(ValueError):
            auc([np.nan, 0.5], [0, 1])

    def test_exact_match_with_pairwise_oracle(self, rng):
        for _ in range(300):
            n = int(rng.integers(2, 51))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = np.round(rng.normal(size=n), 1)  # coarse grid forces ties
            assert auc(scores, labels) == pairwise_auc(scores, labels)

    @given(seed=st.integers(0, 10**6), scale=st.floats(0.1, 10), shift=st.floats(-5, 5))
    @settings(max_examples=40, deadline=None)
    def test_invariant_under_strictly_increasing_transforms(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        n = 30
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = rng.normal(size=n)
        base = auc(scores, labels)
        assert auc(scale * scores + shift, labels) == pytest.approx(base, abs=1e-12)
        assert auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)


class TestMacroF1:
    def test_perfect_predictions(self):
        assert macro_f1([0, 1, 0, 1], [0, 1, 0, 1]) == 1.0

    def test_all_zero_predictions_half_positive_labels(self):
        # class 0: precision 1/2, recall 1 -> F1 2/3; class 1: no predictions -> 0.
        preds = [0, 0, 0, 0]
        labels = [0, 0, 1, 1]
        assert macro_f1(preds, labels) == pytest.approx(1 / 3)

    def test_exact_match_with_confusion_oracle(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 40))
            preds = rng.integers(0, 2, size=n)
            labels = rng.integers(0, 2, size=n)
            assert macro_f1(preds, labels) == naive_macro_f1(preds, labels)

    @given(seed=st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_invariant_under_joint_permutation(self, seed):
        rng = np.random.default_rng(seed)
        n = 25
        preds = rng.integers(0, 2, size=n)
        labels = rng.integers(0, 2, size=n)
        perm = rng.permutation(n)
        assert macro_f1(preds, labels) == macro_f1(preds[perm], labels[perm])
        assert accuracy(preds, labels) == accuracy(preds[perm], labels[perm])


def test_confusion_orientation():
    counts = confusion_counts([1, 1, 0, 0], [1, 0, 1, 0])
    # rows = actual, cols = predicted
    np.testing.assert_array_equal(counts, [[1, 1], [1, 1]])
    counts = confusion_counts([1, 1, 1], [1, 1, 0])
    np.testing.assert_array_equal(counts, [[0, 1], [0, 2]])


def test_compute_metrics_consistency(rng):
    n = 40
    labels = rng.integers(0, 2, size=n)
    labels[:2] = [0, 1]
    scores = rng.random(n)
    preds = (scores > 0.5).astype(int)
    report = compute_metrics(scores, preds, labels, EvalSplit.TEST)
    assert report.split is EvalSplit.TEST
    assert report.n == n
    counts = np.array(report.confusion)
    assert counts.sum() == n
    assert report.accuracy == pytest.approx((counts[0, 0] + counts[1, 1]) / n)
    payload = report.to_dict()
    assert payload["split"] == "test"
