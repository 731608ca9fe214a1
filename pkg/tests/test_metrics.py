import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binocular_dr.metrics import (
    MetricReport,
    MetricWarning,
    aca,
    confusion_matrix,
    is_better,
    macro_auc,
    macro_f1,
    metric_report,
    per_class_accuracy,
)


# -- brute-force oracles --------------------------------------------------

def loop_confusion(true, pred, k):
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(true, pred):
        cm[t][p] += 1
    return cm


def loop_aca(true, pred, k):
    recalls = []
    for c in range(k):
        n = sum(1 for t in true if t == c)
        if n:
            recalls.append(sum(1 for t, p in zip(true, pred) if t == c and p == c) / n)
    return sum(recalls) / len(recalls)


def loop_f1(true, pred, k):
    f1s = []
    for c in range(k):
        if not any(t == c for t in true):
            continue
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(f1s) / len(f1s)


def pairwise_auc(scores, positive):
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def loop_macro_auc(scores, true, k):
    aucs = []
    for c in range(k):
        positive = [t == c for t in true]
        if all(positive) or not any(positive):
            continue
        aucs.append(pairwise_auc([row[c] for row in scores], positive))
    return sum(aucs) / len(aucs)


def random_instance(rng, k=5):
    n = int(rng.integers(2, 30))
    true = rng.integers(0, k, n)
    if len(set(true.tolist())) < 2:
        true[0], true[1] = 0, 1
    pred = np.where(rng.random(n) < 0.5, true, rng.integers(0, k, n))
    # coarse scores so ties occur
    scores = np.round(rng.random((n, k)) * 4) / 4
    return true, pred, scores


class TestConfusion:
    def test_identity(self):
        assert np.array_equal(confusion_matrix(range(5), range(5)), np.eye(5, dtype=int))

    def test_single_cell(self):
        cm = confusion_matrix([0, 0], [1, 1])
        assert cm[0, 1] == 2 and cm.sum() == 2

    @pytest.mark.parametrize("true, pred", [([], []), ([0, 1], [0]), ([5], [0]), ([0], [-1])])
    def test_errors(self, true, pred):
        with pytest.raises(ValueError):
            confusion_matrix(true, pred)

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40))
    def test_transpose_and_total(self, pairs):
        true, pred = zip(*pairs)
        cm = confusion_matrix(true, pred)
        assert np.array_equal(cm.T, confusion_matrix(pred, true))
        assert cm.sum() == len(pairs)
        for c, acc in enumerate(per_class_accuracy(cm)):
            rows = cm[c].sum()
            assert acc == (cm[c, c] / rows if rows else None)


class TestAca:
    def test_perfect(self):
        assert aca(np.eye(5) * 3) == 1.0

    def test_two_class(self):
        assert aca([[2, 0], [1, 1]]) == 0.75

    def test_missing_class_warns(self):
        with pytest.warns(MetricWarning, match=r"\[1\]"):
            assert aca([[1, 0], [0, 0]]) == 1.0

    @settings(max_examples=50)
    @given(st.integers(1, 6), st.lists(st.integers(0, 4), min_size=5, max_size=5), st.randoms())
    def test_balanced_equals_accuracy(self, per_class, offsets, rnd):
        true = [c for c in range(5) for _ in range(per_class)]
        pred = [(t + offsets[t] * (rnd.random() < 0.5)) % 5 for t in true]
        cm = confusion_matrix(true, pred)
        assert aca(cm) == pytest.approx(np.trace(cm) / cm.sum(), abs=1e-15)


class TestMacroF1:
    def test_perfect(self):
        assert macro_f1(np.eye(5, dtype=int)) == 1.0

    def test_two_class(self):
        assert macro_f1([[2, 0], [1, 1]]) == pytest.approx((0.8 + 2 / 3) / 2, abs=1e-15)
        assert round(macro_f1([[2, 0], [1, 1]]), 4) == 0.7333

    def test_never_predicted_counts_zero(self):
        # class 2 is true once but never predicted
        cm = confusion_matrix([0, 1, 2], [0, 1, 1])
        with pytest.warns(MetricWarning):
            assert macro_f1(cm) == pytest.approx((1 + 2 / 3 + 0) / 3)


class TestAuc:
    def test_one_hot(self):
        true = [0, 1, 2, 3, 4, 0]
        assert macro_auc(np.eye(5)[true], true) == 1.0

    def test_binary_case(self):
        s = np.array([0.1, 0.4, 0.35, 0.8])
        assert macro_auc(np.stack([1 - s, s], axis=1), [0, 0, 1, 1]) == 0.75

    def test_constant_scores(self):
        assert macro_auc(np.full((6, 5), 0.2), [0, 1, 2, 3, 4, 0]) == 0.5

    def test_undefined(self):
        with pytest.raises(ValueError, match="undefined"):
            macro_auc(np.full((3, 5), 0.2), [1, 1, 1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_transform_invariant(self, seed):
        rng = np.random.default_rng(seed)
        true, _, scores = random_instance(rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MetricWarning)
            base = macro_auc(scores, true)
            assert macro_auc(np.exp(3 * scores) - 7, true) == pytest.approx(base, abs=1e-12)


class TestOracles:
    def test_random_instances(self):
        rng = np.random.default_rng(2024)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MetricWarning)
            for _ in range(200):
                true, pred, scores = random_instance(rng)
                t, p = true.tolist(), pred.tolist()
                cm = confusion_matrix(true, pred)
                assert cm.tolist() == loop_confusion(t, p, 5)
                assert aca(cm) == loop_aca(t, p, 5)
                assert macro_f1(cm) == loop_f1(t, p, 5)
                assert macro_auc(scores, true) == pytest.approx(loop_macro_auc(scores.tolist(), t, 5), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_ranges(self, seed):
        true, pred, scores = random_instance(np.random.default_rng(seed))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MetricWarning)
            cm = confusion_matrix(true, pred)
            for v in (aca(cm), macro_f1(cm), macro_auc(scores, true)):
                assert 0.0 <= v <= 1.0


class TestReport:
    def test_roundtrip(self):
        logits = np.eye(5)[[0, 1, 2, 3, 4, 1]] * 3
        report = metric_report([0, 1, 2, 3, 4, 2], logits)
        assert report.confusion[2][1] == 1
        assert MetricReport.from_dict(report.to_dict()) == report

    @pytest.mark.filterwarnings("ignore::binocular_dr.metrics.MetricWarning")
    def test_auc_none_when_undefined(self):
        report = metric_report([2, 2], np.zeros((2, 5)))
        assert report.auc is None

    def test_is_better(self):
        assert is_better(0.5, None)
        assert is_better(0.5, 0.4) and not is_better(0.4, 0.4)
        assert is_better(0.3, 0.4, higher_is_better=False)
