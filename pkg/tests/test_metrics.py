"""Metrics against direct-moment and confusion-matrix oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catgan.metrics import (LabelScores, MetricsReport, binary_scores, ccc,
                            classification_metrics, cross_entropy, fake_label,
                            huber, mse, pct_real_as_real, sigmoid_ce,
                            softmax_ce)


class TestMse:
    def test_perfect_prediction(self):
        assert mse([1.0, -0.5, 2.0], [1.0, -0.5, 2.0]) == 0.0

    def test_hand_value(self):
        assert mse([1.0, 1.0], [0.0, 2.0]) == pytest.approx(1.0)

    def test_single_square(self):
        assert mse([0.5], [0.0]) == pytest.approx(0.25)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mse([], [])


class TestCcc:
    def test_self_concordance(self):
        x = [0.1, 0.5, -0.2, 0.9]
        assert ccc(x, x) == pytest.approx(1.0)

    def test_zero_covariance(self):
        assert ccc([1.0, 2.0, 3.0], [2.0, 2.0, 2.0]) == pytest.approx(0.0)

    def test_centred_mirror_is_minus_one(self):
        x = np.array([0.2, -0.7, 0.5, 0.0])
        y = -x + 2 * x.mean()
        assert ccc(x, y) == pytest.approx(-1.0)

    def test_constant_equal_convention(self):
        assert ccc([0.3, 0.3], [0.3, 0.3]) == 1.0

    def test_constant_unequal_convention(self):
        assert ccc([0.3, 0.3], [0.5, 0.5]) == 0.0

    def test_matches_direct_moment_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = rng.normal(size=20)
            y = 0.5 * x + rng.normal(size=20) * 0.3
            mx, my = x.mean(), y.mean()
            cov = np.mean((x - mx) * (y - my))
            expected = 2 * cov / (x.var() + y.var() + (mx - my) ** 2)
            assert ccc(x, y) == pytest.approx(expected, abs=1e-12)

    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=40),
           st.integers(0, 2**31 - 1))
    @settings(max_examples=150, deadline=None)
    def test_range_and_symmetry(self, xs, seed):
        x = np.asarray(xs)
        y = np.random.default_rng(seed).uniform(-1, 1, size=len(xs))
        v = ccc(x, y)
        assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12
        assert ccc(y, x) == pytest.approx(v, abs=1e-12)

    def test_short_input_rejected(self):
        with pytest.raises(ValueError):
            ccc([1.0], [1.0])


class TestHuber:
    def test_quadratic_branch(self):
        assert huber(0.5, 1.0) == pytest.approx(0.125)

    def test_linear_branch(self):
        assert huber(2.0, 1.0) == pytest.approx(1.5)

    def test_branches_agree_at_knee(self):
        for delta in (0.5, 1.0, 2.0):
            assert huber(delta, delta) == pytest.approx(delta * delta / 2)
            assert huber(-delta, delta) == pytest.approx(delta * delta / 2)

    @given(st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=200, deadline=None)
    def test_midpoint_convexity(self, a, b):
        mid = huber((a + b) / 2)
        assert mid <= (huber(a) + huber(b)) / 2 + 1e-12

    def test_matches_half_mse_inside(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(-1, 1, size=100)
        np.testing.assert_allclose(huber(a, 1.0), 0.5 * a * a)

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ValueError):
            huber(1.0, 0.0)


class TestCrossEntropies:
    def test_plain_cross_entropy(self):
        assert cross_entropy([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))

    def test_sigmoid_ce_maximal_uncertainty(self):
        assert sigmoid_ce(0.0, 0.5) == pytest.approx(math.log(2))

    def test_sigmoid_ce_saturated_no_overflow(self):
        assert sigmoid_ce(50.0, 1.0) == pytest.approx(0.0, abs=1e-12)
        assert sigmoid_ce(-50.0, 0.0) == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(sigmoid_ce(1e4, 0.0))

    def test_sigmoid_ce_matches_naive_formula(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=50) * 3
        t = rng.uniform(0, 1, size=50)
        p = 1 / (1 + np.exp(-z))
        naive = -(t * np.log(p) + (1 - t) * np.log(1 - p))
        np.testing.assert_allclose(sigmoid_ce(z, t), naive, atol=1e-10)

    def test_softmax_ce_uniform_logits_onehot(self):
        for k in (2, 5, 9):
            onehot = np.eye(k)[0]
            assert softmax_ce(np.zeros(k), onehot) == pytest.approx(math.log(k))

    def test_softmax_ce_large_logits_stable(self):
        assert np.isfinite(softmax_ce(np.array([1e4, -1e4]), np.array([1.0, 0.0])))


class TestFakeLabel:
    def test_default_alpha(self):
        np.testing.assert_allclose(fake_label(8, 0.9),
                                   [0.0125] * 8 + [0.9], atol=1e-15)

    def test_no_smoothing(self):
        np.testing.assert_array_equal(fake_label(8, 1.0),
                                      [0.0] * 8 + [1.0])

    @given(st.integers(1, 30), st.floats(0, 1))
    @settings(max_examples=100, deadline=None)
    def test_always_a_probability_vector(self, n, alpha):
        v = fake_label(n, alpha)
        assert len(v) == n + 1
        assert (v >= 0).all()
        assert v.sum() == pytest.approx(1.0, abs=1e-12)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            fake_label(0, 0.9)
        with pytest.raises(ValueError):
            fake_label(8, 1.5)


class TestClassificationMetrics:
    def test_perfect_predictions(self):
        flags = np.random.default_rng(0).integers(0, 2, size=(20, 8))
        scores, mean_f1, mean_acc, mean_of_means = classification_metrics(flags, flags)
        for s in scores:
            # labels absent from the batch yield degenerate (flagged) zeros
            if not s.degenerate:
                assert s.precision == s.recall == s.f1 == 1.0
            assert s.accuracy == 1.0

    def test_hand_confusion_matrix(self):
        true = np.zeros((10, 8), dtype=int)
        pred = np.zeros((10, 8), dtype=int)
        # TP=2, FP=1, FN=1, TN=6 on the first label
        true[:3, 0] = 1
        pred[:2, 0] = 1
        pred[3, 0] = 1
        s = binary_scores(pred[:, 0], true[:, 0])
        assert s.precision == pytest.approx(2 / 3)
        assert s.recall == pytest.approx(2 / 3)
        assert s.f1 == pytest.approx(2 / 3)
        assert s.accuracy == pytest.approx(0.8)
        assert not s.degenerate

    def test_degenerate_all_negative_predictor(self):
        true = np.zeros((10, 1), dtype=int)
        true[:4, 0] = 1
        pred = np.zeros((10, 1), dtype=int)
        s = binary_scores(pred[:, 0], true[:, 0])
        assert s.precision == 0.0
        assert s.degenerate
        assert s.accuracy == pytest.approx(0.6)

    def test_matches_bruteforce_oracle_on_random_batches(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            b = rng.integers(2, 30)
            true = rng.integers(0, 2, size=(b, 8))
            pred = rng.integers(0, 2, size=(b, 8))
            scores, mean_f1, mean_acc, mom = classification_metrics(pred, true)
            for j in range(8):
                tp = fp = fn = tn = 0
                for i in range(b):
                    if pred[i, j] and true[i, j]:
                        tp += 1
                    elif pred[i, j] and not true[i, j]:
                        fp += 1
                    elif not pred[i, j] and true[i, j]:
                        fn += 1
                    else:
                        tn += 1
                prec = tp / (tp + fp) if tp + fp else 0.0
                rec = tp / (tp + fn) if tp + fn else 0.0
                f1 = (2 * prec * rec / (prec + rec)) if prec + rec else 0.0
                acc = (tp + tn) / b
                s = scores[j]
                assert s.precision == pytest.approx(prec, abs=1e-12)
                assert s.recall == pytest.approx(rec, abs=1e-12)
                assert s.f1 == pytest.approx(f1, abs=1e-12)
                assert s.accuracy == pytest.approx(acc, abs=1e-12)
            assert mom == pytest.approx((mean_f1 + mean_acc) / 2, abs=1e-15)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_f1_between_precision_and_recall(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, 2, size=30)
        true = rng.integers(0, 2, size=30)
        s = binary_scores(pred, true)
        if not s.degenerate:
            assert min(s.precision, s.recall) - 1e-12 <= s.f1
            assert s.f1 <= max(s.precision, s.recall) + 1e-12


class TestPctRealAsReal:
    def test_all_confident_real(self):
        assert pct_real_as_real([0.0, 0.0], [0, 0]) == 1.0

    def test_threshold_is_half(self):
        assert pct_real_as_real([0.4, 0.6], [0, 0]) == 0.5
        assert pct_real_as_real([0.5], [0]) == 0.0  # 0.5 counts as fake

    def test_fake_rows_ignored(self):
        assert pct_real_as_real([0.9, 0.1], [1, 0]) == 1.0

    def test_no_real_images_rejected(self):
        with pytest.raises(ValueError, match="no real images"):
            pct_real_as_real([0.2], [1])

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = rng.integers(1, 40)
            probs = rng.uniform(0, 1, size=n)
            flags = rng.integers(0, 2, size=n)
            if (flags == 0).sum() == 0:
                flags[0] = 0
            count = sum(1 for p, f in zip(probs, flags) if f == 0 and p < 0.5)
            total = sum(1 for f in flags if f == 0)
            assert pct_real_as_real(probs, flags) == pytest.approx(count / total)


class TestMetricsReport:
    def _report(self):
        scores = [LabelScores(0.5, 0.6, 0.54, 0.7) for _ in range(8)]
        return MetricsReport(iteration=3000, per_au=scores, mean_f1=0.54,
                             mean_accuracy=0.7, mean_of_means=0.62,
                             pct_real_as_real=0.9)

    def test_tsv_roundtrip_field_count(self):
        line = self._report().to_tsv("train")
        cells = line.split("\t")
        assert cells[0] == "3000"
        assert cells[1] == "train"
        assert len(cells) == 2 + len(MetricsReport.column_names())

    def test_absent_fields_serialise_as_nan(self):
        rep = self._report()
        d = rep.as_dict()
        assert math.isnan(d["ccc_valence"])
        assert d["mean_f1"] == pytest.approx(0.54)

    def test_json_log_contains_fields(self):
        import json
        payload = json.loads(self._report().to_json("test"))
        assert payload["side"] == "test"
        assert payload["iteration"] == 3000
        assert payload["au1_precision"] == pytest.approx(0.5)

    def test_direction_map(self):
        assert MetricsReport.metric_direction("mse_valence") == -1
        assert MetricsReport.metric_direction("mean_f1") == 1
