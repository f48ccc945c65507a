"""AUROC/AUPRC oracles, macro averaging, bootstrap and paired t-tests (src/metrics.py)."""

import itertools
import math
import unittest

import numpy as np
from scipy import stats

from src.metrics import (
    auprc,
    auroc,
    bonferroni,
    bootstrap_ci,
    macro_average,
    macro_metric,
    paired_t_test,
    per_class,
    selection_auroc,
    t_log10_p,
)


def _pairwise_auroc(s, y):
    pos = [a for a, l in zip(s, y) if l == 1]
    neg = [a for a, l in zip(s, y) if l == 0]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def _exhaustive_ap(s, y):
    # Walk the stable-sorted list and average precision at each positive.
    order = sorted(range(len(s)), key=lambda i: -s[i])
    hits, total = 0, 0.0
    for k, i in enumerate(order, start=1):
        if y[i] == 1:
            hits += 1
            total += hits / k
    return total / sum(y)


def _random_instance(rng, n_max):
    n = int(rng.integers(2, n_max + 1))
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    s = np.round(rng.random(n), 1)  # coarse grid forces ties
    return s, y


class AurocTests(unittest.TestCase):
    def test_hand_examples(self):
        self.assertAlmostEqual(auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]), 0.75)
        self.assertEqual(auroc([0.5, 0.5], [0, 1]), 0.5)
        self.assertEqual(auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]), 1.0)

    def test_single_class_labels_are_rejected(self):
        with self.assertRaises(ValueError):
            auroc([0.1, 0.2], [1, 1])

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s, y = _random_instance(rng, 100)
            self.assertAlmostEqual(auroc(s, y), _pairwise_auroc(list(s), list(y)), delta=1e-12)

    def test_invariant_under_increasing_transforms(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal(300)
        y = (rng.random(300) < 0.3).astype(int)
        base = auroc(logits, y)
        self.assertEqual(auroc(np.exp(logits), y), base)
        self.assertEqual(auroc(3.0 * logits + 1.0, y), base)
        for tau in rng.uniform(0.2, 5.0, size=5):
            self.assertEqual(auroc(1.0 / (1.0 + np.exp(-logits / tau)), y), base)


class AuprcTests(unittest.TestCase):
    def test_hand_examples(self):
        self.assertAlmostEqual(auprc([0.9, 0.8, 0.3], [1, 0, 1]), (1.0 + 2.0 / 3.0) / 2.0)
        self.assertEqual(auprc([0.9, 0.8, 0.1], [1, 1, 0]), 1.0)
        self.assertEqual(auprc([0.3], [1]), 1.0)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            s, y = _random_instance(rng, 50)
            self.assertAlmostEqual(auprc(s, y), _exhaustive_ap(list(s), list(y)), delta=1e-12)

    def test_no_positive_is_rejected(self):
        with self.assertRaises(ValueError):
            auprc([0.2, 0.4], [0, 0])


class MacroTests(unittest.TestCase):
    def test_values(self):
        self.assertAlmostEqual(macro_average([0.8, 0.6]), 0.7)
        self.assertAlmostEqual(macro_average([0.9, None, 0.7]), 0.8)
        self.assertEqual(macro_average([0.65]), 0.65)

    def test_skipped_classes_are_logged(self):
        with self.assertLogs("src.metrics", level="WARNING") as logs:
            macro_average([0.9, None], names=["Shock", "Pneumonia"])
        self.assertIn("Pneumonia", logs.output[0])

    def test_all_skipped_is_an_error(self):
        with self.assertRaises(ValueError):
            macro_average([None, None])

    def test_per_class_marks_degenerate_columns(self):
        scores = np.array([[0.2, 0.1], [0.8, 0.9]])
        labels = np.array([[0, 1], [1, 1]])
        self.assertEqual(per_class(auroc, scores, labels), [1.0, None])
        self.assertEqual(macro_metric(auroc, scores, labels), 1.0)

    def test_selection_auroc_falls_back_to_chance(self):
        self.assertEqual(selection_auroc(np.array([[0.1], [0.9]]), np.array([[1], [1]])), 0.5)


class BootstrapTests(unittest.TestCase):
    def test_perfect_separation_gives_degenerate_interval(self):
        scores = np.linspace(0, 1, 40)
        labels = (scores > 0.5).astype(int)
        report, reps = bootstrap_ci(auroc, scores, labels, replicates=200, seed=0, name="auroc")
        self.assertEqual((report.lo, report.hi), (1.0, 1.0))
        self.assertEqual(report.point, 1.0)
        self.assertEqual(reps.size, 200)

    def test_same_seed_same_replicates(self):
        rng = np.random.default_rng(3)
        labels = (rng.random(150) < 0.3).astype(int)
        scores = labels * 0.5 + rng.random(150)
        _, a = bootstrap_ci(auroc, scores, labels, replicates=100, seed=7)
        _, b = bootstrap_ci(auroc, scores, labels, replicates=100, seed=7)
        _, c = bootstrap_ci(auroc, scores, labels, replicates=100, seed=8)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))

    def test_interval_narrows_with_more_samples(self):
        def width(n, seed):
            rng = np.random.default_rng(seed)
            labels = (rng.random(n) < 0.4).astype(int)
            scores = labels * 0.6 + rng.standard_normal(n)
            report, _ = bootstrap_ci(auroc, scores, labels, replicates=200, seed=seed)
            return report.hi - report.lo

        for seed in range(5):
            self.assertLess(width(2000, seed), width(200, seed))

    def test_multiclass_scores_are_macro_averaged(self):
        rng = np.random.default_rng(4)
        labels = (rng.random((120, 3)) < 0.5).astype(int)
        scores = labels + rng.standard_normal((120, 3))
        report, _ = bootstrap_ci(auroc, scores, labels, replicates=50, seed=0)
        self.assertAlmostEqual(report.point, macro_metric(auroc, scores, labels))

    def test_rare_positives_redraw_degenerate_replicates(self):
        labels = np.zeros(30, dtype=int)
        labels[0] = 1
        scores = np.linspace(0, 1, 30)
        report, reps = bootstrap_ci(auroc, scores, labels, replicates=50, seed=0)
        self.assertGreater(reps.size, 0)
        self.assertLessEqual(reps.size, 50)
        self.assertEqual(report.n_replicates, reps.size)


class PairedTTestTests(unittest.TestCase):
    def test_identical_inputs(self):
        a = np.array([0.7, 0.8, 0.75])
        self.assertEqual(paired_t_test(a, a), (0.0, 1.0))

    def test_symmetric_differences(self):
        t, p = paired_t_test([1.0, 0.0], [0.0, 1.0])
        self.assertEqual(t, 0.0)
        self.assertAlmostEqual(p, 1.0)

    def test_hand_computed_t(self):
        a = np.array([0.81, 0.79, 0.84, 0.80, 0.83])
        b = np.array([0.78, 0.80, 0.79, 0.77, 0.80])
        d = a - b
        expected = d.mean() / (d.std(ddof=1) / math.sqrt(d.size))
        t, p = paired_t_test(a, b)
        self.assertAlmostEqual(t, expected, delta=1e-9)
        ref = stats.ttest_rel(a, b)
        self.assertAlmostEqual(t, float(ref.statistic), delta=1e-9)
        self.assertAlmostEqual(p, float(ref.pvalue), delta=1e-9)

    def test_sign_flips_when_swapped(self):
        rng = np.random.default_rng(5)
        a, b = rng.random(50), rng.random(50)
        t_ab, p_ab = paired_t_test(a, b)
        t_ba, p_ba = paired_t_test(b, a)
        self.assertAlmostEqual(t_ab, -t_ba, delta=1e-12)
        self.assertAlmostEqual(p_ab, p_ba, delta=1e-12)

    def test_tiny_p_values_stay_finite(self):
        rng = np.random.default_rng(6)
        b = np.zeros(100)
        a = 0.01 + rng.uniform(-0.001, 0.001, size=100)
        t, p = paired_t_test(a, b)
        self.assertGreater(abs(t), 10)
        self.assertLess(p, 1e-15)
        self.assertGreater(p, 0.0)
        log_p = t_log10_p(3000.0, 99)
        self.assertTrue(math.isfinite(log_p))
        self.assertLess(log_p, -200)

    def test_constant_nonzero_difference_is_finite(self):
        t, p = paired_t_test(np.full(50, 0.7), np.full(50, 0.5))
        self.assertTrue(math.isfinite(t))
        self.assertGreater(t, 0.0)
        self.assertEqual(p, 0.0)
        t_neg, _ = paired_t_test(np.full(50, 0.5), np.full(50, 0.7))
        self.assertEqual(t_neg, -t)
        self.assertTrue(math.isfinite(t_log10_p(t, 49)))

    def test_log_p_for_huge_t_continues_the_series(self):
        near = t_log10_p(1e150, 10)
        far = t_log10_p(1e200, 10)
        self.assertTrue(math.isfinite(near) and math.isfinite(far))
        # p ~ t^-df for large t
        self.assertAlmostEqual(near - far, 10 * 50, delta=1e-6)

    def test_matches_scipy_over_a_range_of_t(self):
        for t in (0.3, 1.5, 4.0, 9.0):
            for df in (3, 20, 999):
                ref = 2.0 * stats.t.sf(t, df)
                self.assertAlmostEqual(10.0 ** t_log10_p(t, df) / ref, 1.0, delta=1e-7)

    def test_bonferroni(self):
        self.assertAlmostEqual(bonferroni(0.01, 6), 0.06)
        self.assertEqual(bonferroni(0.4, 6), 1.0)


if __name__ == "__main__":
    unittest.main()
