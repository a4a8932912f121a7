"""
Tests for the learners module.
"""

import unittest

import numpy as np
from numpy.testing import assert_allclose
from scipy.special import expit, logit

from fusion_select.exceptions import ConfigError, EstimationError
from fusion_select.learners import (
    LearnerSpec,
    bound_probability,
    clear_selection_cache,
    discrete_super_learner,
    fit_lasso_cd,
    fit_logistic_irls,
    fit_mean,
    fit_ols,
    kfold_labels,
)


def linear_data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = 1.0 + X @ np.array([2.0, -1.0, 0.0]) + rng.normal(scale=0.5, size=n)
    return X, y


class TestLearnerSpec(unittest.TestCase):
    """Test cases for learner specifications."""

    def test_parse(self):
        """Test parsing plain and constant learner names."""
        self.assertEqual(LearnerSpec.parse("lasso").kind, "lasso")
        spec = LearnerSpec.parse("constant:0.67")
        self.assertEqual(spec.p, 0.67)
        self.assertEqual(spec.label, "constant(0.67)")

    def test_unknown_learner(self):
        """Test that an unknown learner name raises ConfigError."""
        with self.assertRaises(ConfigError):
            LearnerSpec.parse("forest")
        with self.assertRaises(ConfigError):
            LearnerSpec.parse("constant:1.5")


class TestRegressions(unittest.TestCase):
    """Test cases for OLS, logistic and lasso fits."""

    def test_ols_matches_least_squares(self):
        """Test OLS coefficients against numpy least squares."""
        X, y = linear_data()
        model = fit_ols(X, y)
        D = np.column_stack([np.ones(len(y)), X])
        beta = np.linalg.lstsq(D, y, rcond=None)[0]
        assert_allclose(model.intercept, beta[0], atol=1e-8)
        assert_allclose(model.coef, beta[1:], atol=1e-8)
        assert_allclose(model.predict(X), D @ beta, atol=1e-8)

    def test_ols_collinear_columns(self):
        """Test that duplicated columns still give finite fitted values."""
        X, y = linear_data()
        X = np.column_stack([X, X[:, 0]])
        model = fit_ols(X, y)
        self.assertTrue(np.all(np.isfinite(model.predict(X))))

    def test_ols_too_few_rows(self):
        """Test that an unidentified design raises EstimationError."""
        with self.assertRaises(EstimationError):
            fit_ols(np.zeros((2, 3)), [1.0, 2.0])

    def test_logistic_intercept_only(self):
        """Test that an intercept-only logistic fit recovers logit of the mean."""
        y = np.array([1.0, 0.0, 0.0, 1.0, 1.0, 0.25])
        model = fit_logistic_irls(np.zeros((6, 0)), y)
        assert_allclose(model.intercept, logit(y.mean()), atol=1e-7)
        self.assertTrue(model.converged)

    def test_logistic_score_equations(self):
        """Test that the fitted model solves the weighted score equations."""
        rng = np.random.default_rng(1)
        X = rng.normal(size=(300, 2))
        y = rng.binomial(1, expit(0.3 + X @ np.array([1.0, -0.5]))).astype(float)
        w = rng.uniform(0.5, 2.0, 300)
        model = fit_logistic_irls(X, y, weights=w)
        D = np.column_stack([np.ones(300), X])
        score = D.T @ (w * (y - model.predict(X)))
        assert_allclose(score / 300, 0.0, atol=1e-6)

    def test_logistic_offset_without_intercept(self):
        """Test a single-coefficient fit on an offset, the fluctuation shape."""
        rng = np.random.default_rng(2)
        h = rng.choice([-1.0, 1.0], 200)
        offset = rng.normal(scale=0.3, size=200)
        y = rng.uniform(0.1, 0.9, 200)
        model = fit_logistic_irls(h, y, offset=offset, fit_intercept=False)
        mu = expit(offset + model.coef[0] * h)
        self.assertAlmostEqual(float(h @ (y - mu)) / 200, 0.0, places=7)

    def test_logistic_separation_flagged(self):
        """Test that perfectly separated data clamps and flags the fit."""
        X = np.array([-0.02, -0.01, 0.01, 0.02])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        model = fit_logistic_irls(X, y)
        self.assertTrue(model.separated)

    def test_lasso_zero_penalty_is_ols(self):
        """Test that a zero penalty reproduces least squares."""
        X, y = linear_data()
        lasso = fit_lasso_cd(X, y, penalty=0.0, tol=1e-12, max_iter=1000)
        ols = fit_ols(X, y)
        assert_allclose(lasso.coef, ols.coef, atol=1e-5)
        assert_allclose(lasso.intercept, ols.intercept, atol=1e-5)

    def test_lasso_soft_threshold_single_column(self):
        """Test the closed form soft-threshold solution for one standardized column."""
        X, y = linear_data()
        x = X[:, 0]
        z = (x - x.mean()) / x.std()
        lam = 0.3
        rho = z @ (y - y.mean()) / len(y)
        expected = np.sign(rho) * max(abs(rho) - lam, 0.0) / x.std()
        model = fit_lasso_cd(x, y, penalty=lam)
        assert_allclose(model.coef[0], expected, atol=1e-8)

    def test_lasso_large_penalty_gives_mean(self):
        """Test that a penalty above lambda_max zeroes every slope."""
        X, y = linear_data()
        model = fit_lasso_cd(X, y, penalty=100.0)
        assert_allclose(model.coef, 0.0)
        assert_allclose(model.intercept, y.mean())

    def test_lasso_cv_keeps_signal(self):
        """Test that the cross-validated lasso keeps the strong coefficients."""
        X, y = linear_data(n=400)
        model = fit_lasso_cd(X, y, seed=4)
        self.assertGreater(model.coef[0], 1.5)
        self.assertLess(model.coef[1], -0.5)

    def test_binomial_lasso_kkt_conditions(self):
        """Test the optimality conditions of a binomial lasso at a fixed penalty."""
        rng = np.random.default_rng(6)
        X = rng.normal(size=(400, 3))
        y = rng.binomial(1, expit(0.5 + X @ np.array([1.5, -1.0, 0.0]))).astype(float)
        lam = 0.02
        model = fit_lasso_cd(X, y, family="binomial", penalty=lam, tol=1e-12, max_iter=500)
        Z = (X - X.mean(axis=0)) / X.std(axis=0)
        residual = y - model.predict(X)
        grad = Z.T @ residual / len(y)
        beta = model.coef * X.std(axis=0)
        active = beta != 0
        self.assertTrue(active[0] and active[1])
        assert_allclose(grad[active], lam * np.sign(beta[active]), atol=1e-6)
        self.assertTrue(np.all(np.abs(grad[~active]) <= lam + 1e-6))
        self.assertAlmostEqual(float(residual.mean()), 0.0, places=6)

    def test_binomial_lasso_zero_penalty_is_logistic(self):
        """Test that a zero-penalty binomial lasso matches the IRLS maximum likelihood fit."""
        rng = np.random.default_rng(8)
        X = rng.normal(size=(300, 2))
        y = rng.binomial(1, expit(-0.2 + X @ np.array([0.8, -0.6]))).astype(float)
        lasso = fit_lasso_cd(X, y, family="binomial", penalty=0.0, tol=1e-12, max_iter=500)
        mle = fit_logistic_irls(X, y, tol=1e-12)
        assert_allclose(lasso.coef, mle.coef, atol=1e-6)
        assert_allclose(lasso.intercept, mle.intercept, atol=1e-6)

    def test_cv_lasso_refit_is_exact_at_chosen_penalty(self):
        """Test that the cross-validated fit equals a direct fit at the selected penalty."""
        X, y = linear_data(n=400)
        model = fit_lasso_cd(X, y, seed=4, tol=1e-10)
        direct = fit_lasso_cd(X, y, penalty=model.penalty, tol=1e-10)
        assert_allclose(model.coef, direct.coef, atol=1e-6)
        assert_allclose(model.intercept, direct.intercept, atol=1e-6)

    def test_binomial_lasso_predicts_probabilities(self):
        """Test that a binomial lasso returns probabilities with the right ordering."""
        rng = np.random.default_rng(3)
        X = rng.normal(size=(300, 2))
        y = rng.binomial(1, expit(2.0 * X[:, 0])).astype(float)
        model = fit_lasso_cd(X, y, family="binomial", seed=1)
        p = model.predict(np.array([[-2.0, 0.0], [2.0, 0.0]]))
        self.assertTrue(np.all((p > 0) & (p < 1)))
        self.assertLess(p[0], p[1])


class TestSuperLearner(unittest.TestCase):
    """Test cases for the discrete super learner."""

    def test_kfold_labels(self):
        """Test that fold labels are balanced and seeded."""
        labels = kfold_labels(23, 5, seed=9)
        counts = np.bincount(labels)
        self.assertEqual(len(counts), 5)
        self.assertLessEqual(counts.max() - counts.min(), 1)
        np.testing.assert_array_equal(labels, kfold_labels(23, 5, seed=9))

    def test_prefers_ols_on_linear_signal(self):
        """Test that OLS beats the mean on a linear outcome."""
        X, y = linear_data()
        selection = discrete_super_learner([LearnerSpec("ols"), LearnerSpec("mean")], X, y, seed=1)
        self.assertEqual(selection.chosen.kind, "ols")
        self.assertLess(selection.cv_risks[LearnerSpec("ols")], selection.cv_risks[LearnerSpec("mean")])

    def test_prefers_mean_on_noise(self):
        """Test that the mean wins for a binary response unrelated to X."""
        rng = np.random.default_rng(5)
        X = rng.normal(size=(200, 30))
        y = rng.binomial(1, 0.5, 200).astype(float)
        specs = [LearnerSpec("mean"), LearnerSpec("logistic")]
        selection = discrete_super_learner(specs, X, y, loss="negloglik", seed=2)
        self.assertEqual(selection.chosen.kind, "mean")

    def test_ols_with_binomial_loss_rejected(self):
        """Test that an OLS learner cannot fit a binary response."""
        with self.assertRaises(ConfigError):
            discrete_super_learner([LearnerSpec("ols")], np.zeros((4, 1)), [0, 1, 0, 1], loss="negloglik")

    def test_single_learner_reports_train_risk(self):
        """Test that a one-learner library reports an in-sample risk, not a CV risk."""
        X, y = linear_data()
        selection = discrete_super_learner([LearnerSpec("ols")], X, y, seed=1)
        self.assertEqual(selection.cv_risks, {})
        summary = selection.to_dict()
        self.assertIsNone(summary["cv_risks"])
        residual = y - selection.model.predict(X)
        self.assertAlmostEqual(summary["train_risk"], float(np.mean(residual ** 2)), places=10)

    def test_selection_reused_for_identical_inputs(self):
        """Test that identical inputs return the memoized selection until the cache is cleared."""
        X, y = linear_data(seed=7)
        specs = [LearnerSpec("lasso"), LearnerSpec("mean")]
        first = discrete_super_learner(specs, X, y, seed=3)
        self.assertIs(discrete_super_learner(specs, X.copy(), y.copy(), seed=3), first)
        self.assertIsNot(discrete_super_learner(specs, X, y, seed=4), first)
        clear_selection_cache()
        again = discrete_super_learner(specs, X, y, seed=3)
        self.assertIsNot(again, first)
        assert_allclose(again.model.coef, first.model.coef)

    def test_helpers(self):
        """Test mean fits and probability bounds."""
        assert_allclose(fit_mean([1.0, 2.0, 3.0]).predict(np.zeros((2, 1))), [2.0, 2.0])
        assert_allclose(bound_probability(np.array([0.0, 0.5, 1.0]), 0.01), [0.01, 0.5, 0.99])


if __name__ == '__main__':
    unittest.main()
