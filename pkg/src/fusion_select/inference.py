"""
Confidence intervals for the experiment-selector CV-TMLE.

The estimated limit distribution stacks standardized bias coordinates
(one per candidate experiment and fold, on the experiment-selection sets)
above ATE coordinates (one per candidate and fold, on the estimation sets).
Monte Carlo draws from N(0, Sigma) re-run the selector per fold and average
the ATE coordinate of the selected experiment over folds.
"""

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from scipy import linalg, stats

from fusion_select.exceptions import ConfigError, EstimationError

DRAW_BATCH = 250


@dataclass(frozen=True)
class ConfidenceInterval:
    """Two-sided interval with the method that produced it."""

    lower: float
    upper: float
    method: str
    draws: int = 0
    alpha: float = 0.05

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise EstimationError(f"{self.method} interval is not finite")
        if self.lower > self.upper:
            raise EstimationError(f"{self.method} interval has lower > upper")

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, value):
        return self.lower <= value <= self.upper

    def below(self, value=0.0):
        """True when the whole interval lies below value."""
        return self.upper < value

    def to_dict(self):
        return {
            "lower": float(self.lower),
            "upper": float(self.upper),
            "method": self.method,
            "draws": int(self.draws),
            "alpha": float(self.alpha),
        }


def wald_interval(estimate, variance, alpha=0.05, method="wald"):
    """Normal interval estimate +/- z * sqrt(variance)."""
    if not np.isfinite(variance) or variance < 0:
        raise EstimationError(f"invalid variance {variance!r} for a Wald interval")
    z = stats.norm.ppf(1 - alpha / 2)
    half = z * np.sqrt(variance)
    return ConfidenceInterval(estimate - half, estimate + half, method, 0, alpha)


@dataclass(frozen=True, eq=False)
class LimitDistributionModel:
    """
    Estimated limit distribution of the standardized selector inputs.

    Args:
        coordinates (tuple): (kind, s, v) per row/column of sigma_tilde,
            all bias coordinates first, then all ATE coordinates
        sigma_raw (np.ndarray): Empirical cross-moment matrix before repair
        sigma_tilde (np.ndarray): Symmetrized matrix with eigenvalues clipped at 0
        factor (np.ndarray): Matrix L with L @ L.T == sigma_tilde
        bias_plugins (dict): sqrt(n) times the fold bias estimate, per (s, v)
        variance_terms (dict): Selector variance term per (s, v)
        n (int): Sample size
        candidates (tuple): Candidate experiments in increasing order
        folds (tuple): Fold labels
        penalty (float): Variance penalty c(n)
    """

    coordinates: Tuple[Tuple[str, int, int], ...]
    sigma_raw: np.ndarray
    sigma_tilde: np.ndarray
    factor: np.ndarray
    bias_plugins: Dict[Tuple[int, int], float]
    variance_terms: Dict[Tuple[int, int], float]
    n: int
    candidates: Tuple[int, ...]
    folds: Tuple[int, ...]
    penalty: float = 1.0

    def index(self, kind, s, v):
        return self.coordinates.index((kind, s, v))

    def scaled_bias(self, factor):
        """Copy with every bias plug-in multiplied by factor."""
        plugins = {key: value * factor for key, value in self.bias_plugins.items()}
        return LimitDistributionModel(
            self.coordinates, self.sigma_raw, self.sigma_tilde, self.factor, plugins,
            self.variance_terms, self.n, self.candidates, self.folds, self.penalty,
        )


def repair_covariance(sigma):
    """Symmetrize and clip negative eigenvalues; returns (matrix, factor)."""
    sym = (sigma + sigma.T) / 2
    try:
        eigenvalues, vectors = linalg.eigh(sym)
    except linalg.LinAlgError as e:
        raise EstimationError("eigendecomposition of the limit covariance failed") from e
    clipped = np.clip(eigenvalues, 0.0, None)
    if np.any(eigenvalues < 0):
        logger.debug("Clipped {} negative eigenvalues (min {:.3g})", int((eigenvalues < 0).sum()), eigenvalues.min())
    factor = vectors * np.sqrt(clipped)
    repaired = factor @ factor.T
    return (repaired + repaired.T) / 2, factor


def build_limit_model(run):
    """
    Build Sigma from the EIC vectors stored on a run.

    Each entry is the mean over all n rows of the product of two per-row
    contributions, each referenced to the full table.

    Args:
        run (EsCvtmleRun): Completed estimator run

    Returns:
        LimitDistributionModel: Model ready for sampling
    """
    candidates = tuple(run.candidates)
    folds = tuple(run.folds.folds())
    coordinates = [("bias", s, v) for s in candidates for v in folds]
    coordinates += [("ate", s, v) for s in candidates for v in folds]
    columns = [run.bias_eic(s, v).values for _, s, v in coordinates[: len(coordinates) // 2]]
    columns += [run.cv_ates[s].eics[v].values for _, s, v in coordinates[len(coordinates) // 2:]]
    D = np.column_stack(columns)
    sigma = D.T @ D / run.n
    if not np.all(np.isfinite(sigma)):
        raise EstimationError("limit covariance has non-finite entries")
    sigma_tilde, factor = repair_covariance(sigma)
    root_n = np.sqrt(run.n)
    plugins = {(s, v): root_n * run.bias_term(s, v) for s in candidates for v in folds}
    return LimitDistributionModel(
        coordinates=tuple(coordinates),
        sigma_raw=sigma,
        sigma_tilde=sigma_tilde,
        factor=factor,
        bias_plugins=plugins,
        variance_terms=dict(run.variance_terms),
        n=run.n,
        candidates=candidates,
        folds=folds,
        penalty=run.config.penalty,
    )


def _draw_batch(model, size, seed, batch):
    bit_generator = np.random.Philox(seed)
    if batch:
        bit_generator = bit_generator.jumped(batch)
    rng = np.random.Generator(bit_generator)
    Z = rng.standard_normal((size, model.factor.shape[1])) @ model.factor.T

    chosen = np.empty((size, len(model.folds)), dtype=int)
    H = np.zeros(size)
    for j, v in enumerate(model.folds):
        criteria = np.column_stack([
            model.n * model.variance_terms[(s, v)] / model.penalty
            + (Z[:, model.index("bias", s, v)] + model.bias_plugins[(s, v)]) ** 2
            for s in model.candidates
        ])
        pick = np.argmin(criteria, axis=1)
        chosen[:, j] = np.asarray(model.candidates)[pick]
        ate_columns = np.array([model.index("ate", s, v) for s in model.candidates])
        H += Z[np.arange(size), ate_columns[pick]]
    return H / len(model.folds), chosen


def sample_limit(model, draws=1000, seed=0, n_jobs=1):
    """
    Draw from the limit distribution of the standardized estimator.

    Draws are made in fixed batches, batch b using the counter-based stream
    Philox(seed) jumped b times, so results do not depend on n_jobs.

    Returns:
        tuple: (H draws, selected experiment per draw and fold)
    """
    sizes = [min(DRAW_BATCH, draws - start) for start in range(0, draws, DRAW_BATCH)]
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_draw_batch)(model, size, seed, b) for b, size in enumerate(sizes)
    )
    return np.concatenate([r[0] for r in results]), np.vstack([r[1] for r in results])


def monte_carlo_ci(model, run, draws=1000, alpha=0.05, seed=0, n_jobs=1):
    """
    Quantile interval psi_n + q/sqrt(n) from limit-distribution draws.

    Args:
        model (LimitDistributionModel): Estimated limit distribution
        run (EsCvtmleRun): Run supplying psi_n
        draws (int): Monte Carlo sample size
        alpha (float): Two-sided level
        seed (int): Seed of the draw stream
        n_jobs (int): Workers for draw batches

    Returns:
        tuple: (ConfidenceInterval, estimated variance of psi_n)
    """
    if run.all_rct:
        raise ConfigError("every fold selected the trial alone; use wald_rct_ci")
    H, _ = sample_limit(model, draws, seed, n_jobs)
    lower, upper = np.quantile(H, [alpha / 2, 1 - alpha / 2])
    root_n = np.sqrt(model.n)
    ci = ConfidenceInterval(run.psi_n + lower / root_n, run.psi_n + upper / root_n, "monte_carlo", draws, alpha)
    return ci, float(np.var(H, ddof=1) / model.n) if draws > 1 else 0.0


def selection_frequencies(model, draws=1000, seed=0, n_jobs=1):
    """Share of (draw, fold) pairs in which each candidate is selected."""
    _, chosen = sample_limit(model, draws, seed, n_jobs)
    return {int(s): float(np.mean(chosen == s)) for s in model.candidates}


def wald_rct_ci(run, alpha=0.05):
    """
    Influence-curve Wald interval used when every fold selects the trial.

    Returns:
        tuple: (ConfidenceInterval, estimated variance of psi_n)
    """
    if not run.all_rct:
        raise ConfigError("an external experiment was selected; use monte_carlo_ci")
    trial = run.cv_ates[0]
    return trial.wald(alpha, method="wald_rct_only"), trial.variance


def confidence_interval(run, draws=1000, alpha=0.05, seed=0, n_jobs=1):
    """
    Pick the interval for a run: Wald when all folds chose the trial,
    Monte Carlo over the limit distribution otherwise.

    Returns:
        tuple: (ConfidenceInterval, estimated variance, LimitDistributionModel or None)
    """
    if run.all_rct:
        ci, variance = wald_rct_ci(run, alpha)
        return ci, variance, None
    model = build_limit_model(run)
    ci, variance = monte_carlo_ci(model, run, draws, alpha, seed, n_jobs)
    return ci, variance, model
