"""
Tests for the tmle module.
"""

import unittest

import numpy as np
from numpy.testing import assert_allclose
from scipy.special import expit, logit

from fusion_select.config import EstimatorConfig
from fusion_select.data import DataTable, make_folds
from fusion_select.exceptions import ConfigError, EstimationError
from fusion_select.learners import LearnerSpec
from fusion_select.tmle import (
    EicVector,
    Fluctuation,
    _ate_rows,
    _library_for,
    cvtmle_standard,
    fit_all_folds,
    fit_nuisances,
    fluctuate_ate,
    learner_seed,
    targeted_cv_ate,
    tmle_ate,
    update_Q,
)


def trial(n=400, ate=1.0, seed=0, nco=None, missing=0):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(n, 2))
    A = rng.binomial(1, 0.5, n)
    Y = W[:, 0] + ate * A + rng.normal(size=n)
    delta = None
    if missing:
        delta = np.ones(n)
        delta[rng.choice(n, missing, replace=False)] = 0
        Y = np.where(delta == 1, Y, np.nan)
    return DataTable(W=W, S=np.zeros(n), A=A, Y=Y, covariate_names=("W1", "W2"), nco=nco, delta=delta)


class TestFluctuation(unittest.TestCase):
    """Test cases for the targeting step."""

    def test_learner_seed(self):
        """Test that learner seeds are stable and differ across nuisances."""
        self.assertEqual(learner_seed(3, 1, 2, "g_a"), learner_seed(3, 1, 2, "g_a"))
        self.assertNotEqual(learner_seed(3, 1, 2, "g_a"), learner_seed(3, 1, 2, "g_s"))
        self.assertEqual(learner_seed(3, None, 2, "Q_pooled"), learner_seed(3, 0, 2, "Q_pooled"))

    def test_update_in_both_modes(self):
        """Test the clever and weights mode updates against their formulas."""
        q1, q0, g1 = np.array([0.3, 0.6]), np.array([0.2, 0.5]), np.array([0.5, 0.25])
        clever = Fluctuation(0.1, "clever")
        u1, u0 = update_Q(q1, q0, clever, g1)
        assert_allclose(u1, expit(logit(q1) + 0.1 / g1))
        assert_allclose(u0, expit(logit(q0) - 0.1 / (1 - g1)))
        weights = Fluctuation(0.1, "weights")
        u1, u0 = update_Q(q1, q0, weights, g1)
        assert_allclose(u1, expit(logit(q1) + 0.1))
        assert_allclose(u0, expit(logit(q0) - 0.1))

    def test_zero_covariate_gives_zero_epsilon(self):
        """Test that an all-zero covariate leaves the initial fit untouched."""
        fl = fluctuate_ate(np.zeros(3), np.zeros(3), np.array([0.1, 0.5, 0.9]), "weights")
        self.assertEqual(fl.epsilon, 0.0)

    def test_constant_outcome_rejected(self):
        """Test that targeting a constant outcome raises EstimationError."""
        with self.assertRaises(EstimationError):
            fluctuate_ate(np.zeros(3), np.ones(3), np.full(3, 0.5), "clever")

    def test_unknown_mode(self):
        """Test that an unknown mode raises ConfigError."""
        with self.assertRaises(ConfigError):
            fluctuate_ate(np.zeros(2), np.ones(2), np.array([0.0, 1.0]), "both")


class TestEicVector(unittest.TestCase):
    """Test cases for influence curve storage."""

    def test_reference_scaling(self):
        """Test that contributions are re-referenced to a sub-population."""
        support = np.array([True, True, True, False, False, False])
        eic = EicVector.from_contributions("x", support, [1.0, 2.0, 3.0], 0.5)
        assert_allclose(eic.values, [2.0, 4.0, 6.0, 0.0, 0.0, 0.0])
        assert_allclose(eic.contributions(), [1.0, 2.0, 3.0, 0.0, 0.0, 0.0])
        assert_allclose(eic.over(support), [1.0, 2.0, 3.0])
        assert_allclose(eic.over(np.ones(6, dtype=bool)), eic.values)
        with self.assertRaises(ValueError):
            eic.over(np.array([True, False, False, False, False, False]))

    def test_difference(self):
        """Test that subtracting influence curves subtracts values and estimates."""
        support = np.ones(2, dtype=bool)
        a = EicVector.from_contributions("a", support, [1.0, 3.0], 2.0)
        b = EicVector.from_contributions("b", support, [1.0, 1.0], 0.5)
        diff = a - b
        assert_allclose(diff.values, [0.0, 2.0])
        self.assertEqual(diff.estimate, 1.5)


class TestTmle(unittest.TestCase):
    """Test cases for TMLE and CV-TMLE of the ATE."""

    def setUp(self):
        self.config = EstimatorConfig(rand_prob=0.5)

    def test_library_follows_outcome_family(self):
        """Test that OLS is swapped for logistic on binary outcomes and back."""
        self.assertEqual(_library_for((LearnerSpec("ols"),), "binomial"), (LearnerSpec("logistic"),))
        self.assertEqual(_library_for((LearnerSpec("logistic"), LearnerSpec("ols")), "gaussian"),
                         (LearnerSpec("ols"),))

    def test_score_equation_solved(self):
        """Test that both modes solve the efficient score equation."""
        data = trial()
        for mode in ("weights", "clever"):
            fits = fit_nuisances(data, None, None, 0, EstimatorConfig(rand_prob=0.5, mode=mode))
            result = tmle_ate(data, fits, np.ones(data.n, dtype=bool), mode)
            phi = result.eic.contributions()
            self.assertAlmostEqual(float(phi.mean()), 0.0, places=6)

    def test_estimate_near_truth(self):
        """Test that the TMLE recovers a known effect in a randomized trial."""
        data = trial(n=1000, ate=1.0, seed=7)
        fits = fit_nuisances(data, None, None, 0, self.config)
        result = tmle_ate(data, fits, np.ones(data.n, dtype=bool), "weights")
        self.assertLess(abs(result.estimate - 1.0), 0.25)

    def test_pooled_epsilon_solves_score_over_folds(self):
        """Test that one epsilon over every estimation set solves the pooled score."""
        data = trial(seed=3)
        folds = make_folds(data, 5, seed=1)
        fits = fit_all_folds(data, folds, 0, self.config, seed=1)
        cv = targeted_cv_ate(data, folds, fits, 0, "weights")
        total = sum(e.contributions()[e.support].sum() for e in cv.eics.values())
        self.assertAlmostEqual(total / data.n, 0.0, places=6)
        self.assertEqual(cv.n_rows, data.n)
        self.assertGreater(cv.variance, 0.0)

    def test_pooled_epsilon_matches_grid_search(self):
        """Test the pooled epsilon against a direct search of the weighted logistic loss."""
        data = trial(seed=6)
        folds = make_folds(data, 5, seed=2)
        fits = fit_all_folds(data, folds, 0, self.config, seed=2)
        for mode in ("weights", "clever"):
            cv = targeted_cv_ate(data, folds, fits, 0, mode)
            inputs = [_ate_rows(data, fits[v], folds.estimation(v), "Y").targeting_inputs() for v in folds.folds()]
            offsets, h, y = (np.concatenate(part) for part in zip(*inputs))
            covariate, weights = (h, np.ones_like(h)) if mode == "clever" else (np.sign(h), np.abs(h))

            def loss(grid):
                mu = expit(offsets[None, :] + grid[:, None] * covariate[None, :])
                return -(weights * (y * np.log(mu) + (1 - y) * np.log(1 - mu))).sum(axis=1)

            coarse = np.linspace(-1.0, 1.0, 2001)
            best = coarse[np.argmin(loss(coarse))]
            fine = np.linspace(best - 1e-3, best + 1e-3, 2001)
            best = fine[np.argmin(loss(fine))]
            self.assertAlmostEqual(cv.fluctuation.epsilon, best, delta=2e-6)

    def test_plugin_stays_inside_outcome_range(self):
        """Test that targeted predictions stay in the unit interval and the ATE within the scale width."""
        data = trial(n=300, seed=9)
        Y = data.Y.copy()
        Y[np.argmin(Y)] -= 40.0
        data = DataTable(W=data.W, S=data.S, A=data.A, Y=Y, covariate_names=data.covariate_names)
        fits = fit_nuisances(data, None, None, 0, EstimatorConfig())
        for mode in ("weights", "clever"):
            result = tmle_ate(data, fits, np.ones(data.n, dtype=bool), mode)
            q1, q0 = update_Q(fits.q(data.W, 1), fits.q(data.W, 0), result.fluctuation, fits.g1(data.W))
            for q in (q1, q0):
                self.assertTrue(np.all((q > 0) & (q < 1)))
            self.assertLessEqual(abs(result.estimate), fits.scale.width)

    def test_missing_outcomes(self):
        """Test that outcomes missing at random still give a sensible estimate."""
        data = trial(n=600, seed=5, missing=60)
        result = cvtmle_standard(data, 5, "ate_of_A", self.config, seed=2)
        self.assertTrue(np.isfinite(result.estimate))
        self.assertLess(abs(result.estimate - 1.0), 0.35)

    def test_binary_outcome(self):
        """Test that binary outcomes run through the logistic outcome model."""
        rng = np.random.default_rng(11)
        W = rng.normal(size=(400, 1))
        A = rng.binomial(1, 0.5, 400)
        Y = rng.binomial(1, expit(0.5 * W[:, 0] + A)).astype(float)
        data = DataTable(W=W, S=np.zeros(400), A=A, Y=Y, covariate_names=("W1",))
        fits = fit_nuisances(data, None, None, 0, self.config)
        self.assertEqual(fits.Q_pooled.kind, "logistic")
        result = tmle_ate(data, fits, np.ones(400, dtype=bool), "weights")
        self.assertTrue(-1.0 < result.estimate < 1.0)


class TestCvtmleStandard(unittest.TestCase):
    """Test cases for the standard CV-TMLE targets."""

    def setUp(self):
        self.config = EstimatorConfig(rand_prob=0.5)

    def test_wald_interval(self):
        """Test that the interval is centred on the estimate."""
        result = cvtmle_standard(trial(seed=1), 5, "ate_of_A", self.config)
        assert_allclose((result.ci.lower + result.ci.upper) / 2, result.estimate)
        self.assertGreater(result.variance, 0.0)
        self.assertEqual(result.to_dict()["target"], "ate_of_A")

    def test_unknown_target(self):
        """Test that an unknown target raises ConfigError."""
        with self.assertRaises(ConfigError):
            cvtmle_standard(trial(), 5, "att", self.config)

    def test_constant_nco_difference_equals_ate(self):
        """Test that differencing a constant NCO leaves the ATE unchanged."""
        data = trial(seed=4, nco=np.ones(400))
        ate = cvtmle_standard(data, 5, "ate_of_A", self.config, seed=3)
        did = cvtmle_standard(data, 5, "did_nco", self.config, seed=3)
        assert_allclose(did.estimate, ate.estimate, rtol=1e-12)
        assert_allclose(did.variance, ate.variance, rtol=1e-12)

    def test_study_contrast_on_controls(self):
        """Test the effect of external membership on control outcomes."""
        rng = np.random.default_rng(8)
        base = trial(n=300, seed=8)
        W_ext = rng.normal(size=(300, 2))
        Y_ext = W_ext[:, 0] + 3.0 + rng.normal(size=300)
        data = DataTable(
            W=np.vstack([base.W, W_ext]),
            S=np.r_[np.zeros(300), np.ones(300)],
            A=np.r_[base.A, np.zeros(300)],
            Y=np.r_[base.Y, Y_ext],
            covariate_names=("W1", "W2"),
        )
        result = cvtmle_standard(data, 5, "ate_of_S_on_controls", self.config, seed=0, s=1)
        self.assertEqual(result.experiment, 1)
        self.assertLess(abs(result.estimate - 3.0), 0.4)
        self.assertFalse(result.ci.contains(0.0))

    def test_study_contrast_needs_external_data(self):
        """Test that the control contrast on the trial alone is rejected."""
        with self.assertRaises(ConfigError):
            cvtmle_standard(trial(), 5, "ate_of_S_on_controls", self.config, s=0)


if __name__ == '__main__':
    unittest.main()
