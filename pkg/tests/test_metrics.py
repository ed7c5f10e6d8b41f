import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from benchmark_rows import EXACT_ROW, ROWS
from ccfnet.codec import DISC_INDEX, OBJECT_IDS, VERTEBRA_INDEX, Detection, SpineAnnotation
from ccfnet.metrics import MetricsReport, aggregate_folds, auc, evaluate, match_and_recall, overall_score


def pairwise_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    if not pos or not neg:
        return None
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def gt_at(x=40.0, y=40.0, spacing=0.5, labels=None):
    labels = [False] * 11 if labels is None else labels
    return SpineAnnotation.from_arrays(np.tile([x, y], (11, 1)), labels, spacing)


class TestRecall:
    def test_two_mm_is_hit(self):
        r = match_and_recall(np.tile([44.0, 40.0], (11, 1)), gt_at())
        assert r["hits"].all()

    def test_boundary_is_inclusive(self):
        r = match_and_recall(np.tile([52.0, 40.0], (11, 1)), gt_at())  # 12 px * 0.5 = 6 mm
        assert r["hits"].all()
        r = match_and_recall(np.tile([52.01, 40.0], (11, 1)), gt_at())
        assert not r["hits"].any()

    def test_three_of_five_vertebrae(self):
        xy = np.tile([40.0, 40.0], (11, 1))
        xy[list(VERTEBRA_INDEX[:2])] = [100.0, 100.0]
        r = match_and_recall(xy, gt_at())
        assert r["recall_vertebra"] == 0.6 and r["recall_disc"] == 1.0

    def test_detection_ids_checked(self):
        dets = [Detection(oid, 40.0, 40.0, 0.5) for oid in reversed(OBJECT_IDS)]
        with pytest.raises(ValueError):
            match_and_recall(dets, gt_at())
        ok = [Detection(oid, 40.0, 40.0, 0.5) for oid in OBJECT_IDS]
        assert match_and_recall(ok, gt_at())["hits"].all()

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), r1=st.floats(0.1, 20), r2=st.floats(0.1, 20))
    def test_monotone_in_radius(self, seed, r1, r2):
        lo, hi = sorted((r1, r2))
        rng = np.random.default_rng(seed)
        xy = 40 + rng.normal(0, 10, (11, 2))
        a = match_and_recall(xy, gt_at(), lo)
        b = match_and_recall(xy, gt_at(), hi)
        assert np.all(b["hits"] >= a["hits"])


class TestAUC:
    def test_example(self):
        assert auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75

    def test_separated(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_tie_counts_half(self):
        assert auc([0.5, 0.5], [1, 0]) == 0.5
        assert auc([0.7, 0.5, 0.5], [1, 1, 0]) == 0.75

    def test_absent_class(self):
        assert auc([0.1, 0.2], [1, 1]) is None
        assert auc([0.1, 0.2], [0, 0]) is None

    def test_exhaustive_small_instances(self):
        # every labeling of every length up to 8, with scores drawn from a 3-level grid to force ties
        rng = np.random.default_rng(0)
        for n in range(1, 9):
            for labels in itertools.product([0, 1], repeat=n):
                scores = rng.integers(0, 3, n) / 2
                got, want = auc(scores, labels), pairwise_auc(scores, labels)
                assert (got is None and want is None) or got == pytest.approx(want, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 40))
    def test_monotone_invariance(self, seed, n):
        rng = np.random.default_rng(seed)
        scores = rng.integers(0, 10, n) / 10.0
        labels = rng.random(n) < 0.5
        maps = [lambda s: np.exp(3 * s), lambda s: s**3 + 2, lambda s: np.arctan(10 * s - 5)]
        base = auc(scores, labels)
        for f in maps:
            assert auc(f(scores), labels) == base


class TestScore:
    def test_all_ones(self):
        assert overall_score(1, 1, 1, 1) == 100.0

    @pytest.mark.parametrize("row", sorted(ROWS))
    def test_published_rows(self, row):
        *cols, reported = ROWS[row]
        got = overall_score(*(c / 100 for c in cols))
        assert abs(got - reported) <= 0.15
        if row == EXACT_ROW:
            assert round(got, 2) == reported


class TestEvaluate:
    def test_excludes_missed_objects_from_auc(self):
        labels = np.zeros((2, 11), bool)
        labels[0, list(DISC_INDEX)] = True
        labels[:, list(VERTEBRA_INDEX)] = [[1, 0, 1, 0, 1], [0, 1, 0, 1, 0]]
        anns = [gt_at(labels=list(l)) for l in labels]
        xy = np.tile([40.0, 40.0], (2, 11, 1))
        prob = labels.astype(float)
        # a wrongly scored object that is missed must not affect AUC
        xy[1, 1] = [0.0, 0.0]
        prob[1, 1] = 0.99
        rep = evaluate(xy, prob, anns)
        assert rep.auc_disc == 1.0 and rep.auc_vertebra == 1.0
        assert rep.recall_vertebra == 0.9 and rep.recall_disc == 1.0
        assert rep.score == pytest.approx(100 * 0.95)
        assert rep.counts["hits_vertebra"] == 9

    def test_absent_class_auc(self):
        anns = [gt_at()]
        rep = evaluate(np.tile([40.0, 40.0], (1, 11, 1)), np.zeros((1, 11)), anns)
        assert rep.auc_disc is None and rep.auc_vertebra is None and rep.score is None


def report(v):
    return MetricsReport(v, v, v, v, v)


class TestAggregate:
    def test_mean_and_sample_std(self):
        agg = aggregate_folds([report(v) for v in (1.0, 2.0, 3.0, 4.0)])
        assert agg.mean["score"] == 2.5
        assert agg.std["score"] == pytest.approx(1.2910, abs=1e-4)
        assert agg.n_folds == 4

    def test_single_fold(self):
        assert aggregate_folds([report(0.7)]).std["auc_disc"] == 0.0

    def test_order_invariant(self):
        vals = [0.3, 0.9, 0.5]
        a = aggregate_folds([report(v) for v in vals])
        b = aggregate_folds([report(v) for v in reversed(vals)])
        assert a.mean == b.mean

    def test_absent_values_skipped(self):
        r = MetricsReport(1.0, 1.0, None, 0.5, None)
        agg = aggregate_folds([r, report(0.7)])
        assert agg.mean["auc_disc"] == 0.7 and agg.std["auc_disc"] == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_folds([])
