"""
Tests for the comparators module.
"""

import unittest

import numpy as np
from numpy.testing import assert_allclose

from fusion_select.comparators import (
    cvtmle_rct,
    did_nco_cvtmle,
    run_comparator,
    test_then_pool_cvtmle as ttp_cvtmle,
    test_then_pool_ttest as ttp_ttest,
    welch_ttest,
    welch_ttest_ate,
)
from fusion_select.config import EstimatorConfig
from fusion_select.data import DataTable
from fusion_select.exceptions import ConfigError, EstimationError
from fusion_select.learners import LearnerSpec

CONFIG = EstimatorConfig(
    rand_prob=0.5,
    treatment_library=(LearnerSpec("logistic"),),
    selection_library=(LearnerSpec("logistic"),),
)


def with_external(shift, n=200, seed=0, copy_controls=False):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(n, 1))
    A = np.tile([0, 1], n // 2)
    Y = W[:, 0] + A + rng.normal(size=n)
    if copy_controls:
        W_ext, Y_ext = W[A == 0], Y[A == 0] + shift
    else:
        W_ext = rng.normal(size=(n, 1))
        Y_ext = W_ext[:, 0] + shift + rng.normal(size=n)
    m = len(Y_ext)
    return DataTable(
        W=np.vstack([W, W_ext]),
        S=np.r_[np.zeros(n), np.ones(m)],
        A=np.r_[A, np.zeros(m)],
        Y=np.r_[Y, Y_ext],
        covariate_names=("W1",),
    )


class TestWelch(unittest.TestCase):
    """Test cases for the Welch t-test."""

    def test_hand_example(self):
        """Test a small example worked by hand."""
        estimate, se, df, p_value, ci = welch_ttest([1.0, 2.0, 3.0], [2.0, 3.0, 4.0])
        self.assertAlmostEqual(estimate, -1.0)
        self.assertAlmostEqual(se, 0.8165, places=4)
        self.assertAlmostEqual(df, 4.0)
        self.assertAlmostEqual(p_value, 0.2879, places=3)
        self.assertTrue(ci.contains(0.0))

    def test_zero_spread(self):
        """Test equal constant arms, which have no sampling variation."""
        estimate, se, _, p_value, ci = welch_ttest([1.0, 1.0], [1.0, 1.0])
        self.assertEqual((estimate, se, p_value), (0.0, 0.0, 1.0))
        self.assertEqual(ci.width, 0.0)

    def test_too_few_rows(self):
        """Test that an arm with one observation is rejected."""
        with self.assertRaises(EstimationError):
            welch_ttest([1.0], [1.0, 2.0])

    def test_trial_ate(self):
        """Test the Welch ATE against the difference of arm means."""
        data = with_external(0.0)
        result = welch_ttest_ate(data, data.S == 0)
        trial = data.S == 0
        expected = data.Y[trial & (data.A == 1)].mean() - data.Y[trial & (data.A == 0)].mean()
        assert_allclose(result.estimate, expected)


class TestTestThenPool(unittest.TestCase):
    """Test cases for the test-then-pool comparators."""

    def test_identical_controls_are_pooled(self):
        """Test that copies of the trial controls pass the t-test and are pooled."""
        data = with_external(0.0, copy_controls=True)
        result = ttp_ttest(data, 1)
        self.assertTrue(result.pooled)
        controls = data.Y[data.A == 0].mean()
        assert_allclose(result.estimate, data.Y[data.A == 1].mean() - controls)

    def test_shifted_controls_are_not_pooled(self):
        """Test that strongly shifted controls fail the t-test."""
        data = with_external(10.0)
        result = ttp_ttest(data, 1)
        self.assertFalse(result.pooled)
        assert_allclose(result.estimate, welch_ttest_ate(data, data.S == 0).estimate)

    def test_cvtmle_variant_without_pooling(self):
        """Test that a rejected stage one reproduces the trial CV-TMLE."""
        data = with_external(5.0, seed=1)
        result = ttp_cvtmle(data, 1, 5, CONFIG, seed=3)
        self.assertFalse(result.pooled)
        assert_allclose(result.estimate, cvtmle_rct(data, 5, CONFIG, seed=3).estimate, rtol=1e-12)


class TestDispatch(unittest.TestCase):
    """Test cases for comparator dispatch."""

    def test_unknown_method(self):
        """Test that an unknown method raises ConfigError."""
        with self.assertRaises(ConfigError):
            run_comparator("bootstrap", with_external(0.0), 1, 5, CONFIG)

    def test_bayesian_borrowing_not_implemented(self):
        """Test that map-prior reports its status instead of a number."""
        result = run_comparator("map-prior", with_external(0.0), 1, 5, CONFIG)
        self.assertEqual(result.status, "not implemented")
        self.assertIsNone(result.estimate)

    def test_did_needs_nco(self):
        """Test that the difference-in-differences needs an NCO."""
        with self.assertRaises(ConfigError):
            did_nco_cvtmle(with_external(0.0), 1, 5, CONFIG)

    def test_welch_dispatch(self):
        """Test that the welch method uses the trial rows."""
        data = with_external(3.0)
        result = run_comparator("welch", data, 1, 5, CONFIG)
        assert_allclose(result.estimate, welch_ttest_ate(data, data.S == 0).estimate)
        self.assertEqual(result.to_dict()["status"], "ok")


if __name__ == '__main__':
    unittest.main()
