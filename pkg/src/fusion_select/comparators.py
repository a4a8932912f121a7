"""
Reference estimators: Welch t-test, test-then-pool (t-test and CV-TMLE
variants) and the NCO difference-in-differences CV-TMLE.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from loguru import logger
from scipy import stats

from fusion_select.exceptions import ConfigError, EstimationError
from fusion_select.inference import ConfidenceInterval
from fusion_select.tmle import cvtmle_standard

METHODS = ("welch", "cvtmle-rct", "ttp-ttest", "ttp-cvtmle", "did-nco", "map-prior")
STAGE_ONE_SEED_OFFSET = 7919


@dataclass(frozen=True)
class ComparatorResult:
    """Outcome of one comparator on one dataset."""

    method: str
    estimate: Optional[float]
    ci: Optional[ConfidenceInterval]
    est_var: Optional[float] = None
    pooled: Optional[bool] = None
    p_value: Optional[float] = None
    status: str = "ok"

    def to_dict(self):
        return {
            "method": self.method,
            "status": self.status,
            "estimate": self.estimate,
            "est_var": self.est_var,
            "ci": None if self.ci is None else self.ci.to_dict(),
            "pooled": self.pooled,
            "p_value": self.p_value,
        }


def _arm(data, mask):
    y = data.Y[mask & (data.observed == 1)]
    return y[np.isfinite(y)]


def welch_ttest(treated, control, alpha=0.05):
    """
    Welch two-sample comparison of means.

    Returns:
        tuple: (estimate, standard error, degrees of freedom, p-value, ConfidenceInterval)
    """
    treated = np.asarray(treated, dtype=float)
    control = np.asarray(control, dtype=float)
    if treated.size < 2 or control.size < 2:
        raise EstimationError("Welch test needs at least 2 observations per arm")
    estimate = float(treated.mean() - control.mean())
    v1 = treated.var(ddof=1) / treated.size
    v0 = control.var(ddof=1) / control.size
    se = float(np.sqrt(v1 + v0))
    if se == 0:
        p_value = 1.0 if estimate == 0 else 0.0
        return estimate, 0.0, float("nan"), p_value, ConfidenceInterval(estimate, estimate, "welch", 0, alpha)
    df = float((v1 + v0) ** 2 / (v1 ** 2 / (treated.size - 1) + v0 ** 2 / (control.size - 1)))
    p_value = float(stats.ttest_ind(treated, control, equal_var=False).pvalue)
    half = stats.t.ppf(1 - alpha / 2, df) * se
    return estimate, se, df, p_value, ConfidenceInterval(estimate - half, estimate + half, "welch", 0, alpha)


def welch_ttest_ate(data, subset=None, alpha=0.05, method="welch"):
    """
    Difference of treated and control outcome means with a Welch interval.

    Args:
        data (DataTable): Observations
        subset (np.ndarray, optional): Row mask, all rows by default
        alpha (float): Two-sided level
        method (str): Label recorded on the result

    Returns:
        ComparatorResult: Estimate, interval and p-value
    """
    mask = np.ones(data.n, dtype=bool) if subset is None else np.asarray(subset, dtype=bool)
    estimate, se, _, p_value, ci = welch_ttest(_arm(data, mask & (data.A == 1)), _arm(data, mask & (data.A == 0)), alpha)
    return ComparatorResult(method, estimate, ci, est_var=se ** 2, p_value=p_value)


def test_then_pool_ttest(data, s, alpha_test=0.05, alpha=0.05):
    """
    Pool the external controls of dataset s when a Welch test of equal
    control means does not reject, then run the Welch ATE.

    Returns:
        ComparatorResult: With the pooling decision in pooled
    """
    trial = data.S == 0
    if s is None or s not in data.external_sources:
        result = welch_ttest_ate(data, trial, alpha, "ttp-ttest")
        return result
    trial_controls = _arm(data, trial & (data.A == 0))
    external_controls = _arm(data, data.S == s)
    *_, p_test, _ = welch_ttest(trial_controls, external_controls, alpha_test)
    pooled = p_test >= alpha_test
    logger.debug("Test-then-pool t-test: p={:.4g}, pooled={}", p_test, pooled)
    subset = data.experiment_mask(s) if pooled else trial
    result = welch_ttest_ate(data, subset, alpha, "ttp-ttest")
    return ComparatorResult(result.method, result.estimate, result.ci, result.est_var, pooled, result.p_value)


def cvtmle_rct(data, V, config, seed=0, alpha=0.05):
    """Standard CV-TMLE of the ATE on the trial rows alone."""
    result = cvtmle_standard(data.subset(data.S == 0), V, "ate_of_A", config, seed, 0, alpha)
    return ComparatorResult("cvtmle-rct", result.estimate, result.ci, result.variance)


def test_then_pool_cvtmle(data, s, V, config, seed=0, alpha=0.05):
    """
    Stage 1 estimates the effect of S on Y among controls by CV-TMLE; the
    external controls are pooled when its interval contains 0. Stage 2 is
    the CV-TMLE of the ATE on the pooled or trial-only data. The stages use
    independent fold plans.

    Returns:
        ComparatorResult: With the pooling decision in pooled
    """
    if s is None or s not in data.external_sources:
        result = cvtmle_rct(data, V, config, seed, alpha)
        return ComparatorResult("ttp-cvtmle", result.estimate, result.ci, result.est_var)
    stage_one = cvtmle_standard(data, V, "ate_of_S_on_controls", config, seed + STAGE_ONE_SEED_OFFSET, s, alpha)
    pooled = stage_one.ci.contains(0.0)
    logger.debug("Test-then-pool CV-TMLE: stage one {:.4g}, pooled={}", stage_one.estimate, pooled)
    if pooled:
        result = cvtmle_standard(data.subset(data.experiment_mask(s)), V, "ate_of_A", config, seed, s, alpha)
    else:
        result = cvtmle_standard(data.subset(data.S == 0), V, "ate_of_A", config, seed, 0, alpha)
    return ComparatorResult("ttp-cvtmle", result.estimate, result.ci, result.variance, pooled)


def did_nco_cvtmle(data, s, V, config, seed=0, alpha=0.05):
    """
    Difference-in-differences CV-TMLE: ATE on Y minus ATE on the NCO over
    experiment {0, s}, sharing folds and nuisance fits.

    Returns:
        ComparatorResult: Estimate and Wald interval
    """
    if not data.has_nco:
        raise ConfigError("did-nco needs an NCO column")
    s = 0 if s is None else s
    result = cvtmle_standard(data, V, "did_nco", config, seed, s, alpha)
    return ComparatorResult("did-nco", result.estimate, result.ci, result.variance)


def run_comparator(method, data, s, V, config, seed=0, alpha=0.05):
    """
    Dispatch one comparator by name.

    Raises:
        ConfigError: Unknown method
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method '{method}'; valid methods: {', '.join(METHODS)}")
    if method == "welch":
        return welch_ttest_ate(data, data.S == 0, alpha)
    if method == "cvtmle-rct":
        return cvtmle_rct(data, V, config, seed, alpha)
    if method == "ttp-ttest":
        return test_then_pool_ttest(data, s, alpha_test=0.05, alpha=alpha)
    if method == "ttp-cvtmle":
        return test_then_pool_cvtmle(data, s, V, config, seed, alpha)
    if method == "did-nco":
        return did_nco_cvtmle(data, s, V, config, seed, alpha)
    logger.warning("Comparator map-prior (Bayesian borrowing) is not implemented")
    return ComparatorResult(method, None, None, status="not implemented")
