"""
Regression engine and discrete super learner used for every nuisance fit.

Gaussian lasso minimizes (1/2n)||y - b0 - Zb||^2 + lambda*||b||_1 on internally
standardized columns Z (mean 0, variance 1); binomial lasso replaces the squared
loss by the mean negative log-likelihood. Coefficients are returned on the
original column scale.
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import joblib
import numpy as np
from loguru import logger
from scipy import linalg
from scipy.special import expit, logit

from fusion_select.exceptions import ConfigError, EstimationError

PROBABILITY_FLOOR = 0.005
COEF_BOUND = 50.0
SELECTION_CACHE_SIZE = 256
PATH_MIN_STEPS = 5
PATH_DEV_CHANGE = 1e-5
PATH_DEV_MAX = 0.999

KINDS = ("ols", "logistic", "lasso", "mean", "constant")
LOSSES = ("squared", "negloglik")

_selection_cache = OrderedDict()


@dataclass(frozen=True)
class LearnerSpec:
    """
    Description of a candidate learner.

    Args:
        kind (str): One of ols, logistic, lasso, mean, constant
        p (float, optional): Predicted probability for kind=constant
        n_lambda (int): Length of the lasso penalty grid
        lambda_min_ratio (float): Smallest penalty as a fraction of lambda_max
        cv_folds (int): Internal cross-validation folds for lasso tuning
        max_iter (int): Iteration cap for IRLS / coordinate descent outer loops
        tol (float): Convergence tolerance
    """

    kind: str
    p: Optional[float] = None
    n_lambda: int = 50
    lambda_min_ratio: float = 1e-3
    cv_folds: int = 5
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown learner '{self.kind}'; valid learners: {', '.join(KINDS)}")
        if self.kind == "constant" and (self.p is None or not 0.0 < self.p < 1.0):
            raise ConfigError("constant learner needs 0 < p < 1")
        if self.tol <= 0:
            raise ConfigError("tolerance must be positive")
        if not 0.0 < self.lambda_min_ratio <= 1.0:
            raise ConfigError("lambda_min_ratio must lie in (0, 1]")

    @property
    def label(self):
        if self.kind == "constant":
            return f"constant({self.p:g})"
        return self.kind

    @classmethod
    def parse(cls, text):
        """Parse 'ols', 'lasso', 'constant:0.67' style names."""
        text = text.strip()
        if text.startswith("constant"):
            _, _, value = text.partition(":")
            try:
                return cls("constant", p=float(value))
            except ValueError as e:
                raise ConfigError(f"bad constant learner '{text}'") from e
        return cls(text)


@dataclass(frozen=True, eq=False)
class FittedModel:
    """A fitted regression with identity or logit link."""

    kind: str
    coef: np.ndarray
    intercept: float
    link: str
    columns: Tuple[str, ...] = ()
    converged: bool = True
    separated: bool = False
    penalty: Optional[float] = None

    def linear_predictor(self, X):
        X = _as_matrix(X)
        if self.coef.size == 0:
            return np.full(X.shape[0], self.intercept, dtype=float)
        return self.intercept + X @ self.coef

    def predict(self, X):
        eta = self.linear_predictor(X)
        if self.link == "logit":
            return expit(eta)
        return eta


@dataclass(frozen=True, eq=False)
class SuperLearnerSelection:
    """
    Outcome of a discrete super learner: the chosen spec refit on all data.

    A one-learner library skips cross-validation; cv_risks is then empty and
    train_risk holds the in-sample risk of the refit.
    """

    chosen: LearnerSpec
    cv_risks: Dict[LearnerSpec, float]
    model: FittedModel
    train_risk: Optional[float] = None

    def to_dict(self):
        result = {
            "chosen": self.chosen.label,
            "cv_risks": {spec.label: float(risk) for spec, risk in self.cv_risks.items()} or None,
        }
        if self.train_risk is not None:
            result["train_risk"] = self.train_risk
        return result


def _as_matrix(X, n=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if n is None or X.size == n else X.reshape(n, -1)
    return X


def bound_probability(p, floor=PROBABILITY_FLOOR):
    """Clip probabilities to [floor, 1 - floor]."""
    return np.clip(p, floor, 1.0 - floor)


def fit_ols(X, y, weights=None, columns=()):
    """
    Least squares via the normal equations, with a ridge jitter when the
    cross-product matrix is singular or badly conditioned.

    Args:
        X (array-like): Covariates, shape (n, p)
        y (array-like): Response
        weights (array-like, optional): Non-negative row weights
        columns (tuple): Covariate names

    Returns:
        FittedModel: Identity-link model
    """
    y = np.asarray(y, dtype=float)
    X = _as_matrix(X, len(y))
    n, p = X.shape
    if n != len(y):
        raise EstimationError(f"X has {n} rows but y has {len(y)}")
    if n < p + 1:
        raise EstimationError(f"{n} rows cannot identify {p} slopes and an intercept")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    D = np.column_stack([np.ones(n), X])
    xtx = D.T @ (w[:, None] * D)
    xty = D.T @ (w * y)

    try:
        if np.linalg.cond(xtx) > 1e12:
            raise linalg.LinAlgError("ill-conditioned normal equations")
        beta = linalg.cho_solve(linalg.cho_factor(xtx), xty)
    except linalg.LinAlgError:
        jitter = 1e-8 * max(np.trace(xtx) / xtx.shape[0], 1.0)
        logger.debug("OLS normal equations singular; adding ridge jitter {:.3g}", jitter)
        beta = linalg.cho_solve(linalg.cho_factor(xtx + jitter * np.eye(p + 1)), xty)
    if not np.all(np.isfinite(beta)):
        raise EstimationError("OLS produced non-finite coefficients")
    return FittedModel("ols", beta[1:], float(beta[0]), "identity", tuple(columns))


def _binomial_deviance(y, mu, w):
    mu = np.clip(mu, 1e-15, 1 - 1e-15)
    return -2.0 * np.sum(w * (y * np.log(mu) + (1 - y) * np.log(1 - mu)))


def fit_logistic_irls(X, y, weights=None, offset=None, fit_intercept=True,
                      max_iter=100, tol=1e-8, columns=()):
    """
    Weighted (quasi-)binomial logistic regression by Newton-Raphson / IRLS.

    Fractional responses in [0, 1] are allowed. Convergence is declared when
    the mean score over rows falls below tol. Coefficients that run into
    +/-COEF_BOUND (complete separation) are clamped and flagged.

    Args:
        X (array-like): Covariates, shape (n, p); p may be 0
        y (array-like): Responses in [0, 1]
        weights (array-like, optional): Non-negative row weights
        offset (array-like, optional): Fixed offset on the logit scale
        fit_intercept (bool): Whether to estimate an intercept
        max_iter (int): Newton iteration cap
        tol (float): Mean score tolerance
        columns (tuple): Covariate names

    Returns:
        FittedModel: Logit-link model (the offset is not stored)
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    X = _as_matrix(X, n)
    if np.any((y < 0) | (y > 1)):
        raise EstimationError("logistic response must lie in [0, 1]")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise EstimationError("weights must be non-negative")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    D = np.column_stack([np.ones(n), X]) if fit_intercept else X
    k = D.shape[1]
    beta = np.zeros(k)
    converged = False
    separated = False

    def deviance(b):
        return _binomial_deviance(y, expit(off + D @ b), w)

    for _ in range(max_iter):
        mu = expit(off + D @ beta)
        score = D.T @ (w * (y - mu))
        if k == 0 or np.max(np.abs(score)) / max(n, 1) < tol:
            converged = True
            break
        info = D.T @ ((w * mu * (1 - mu))[:, None] * D)
        try:
            step = linalg.solve(info, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(info, score)[0]
        current = deviance(beta)
        t = 1.0
        while True:
            candidate = np.clip(beta + t * step, -COEF_BOUND, COEF_BOUND)
            if deviance(candidate) <= current + 1e-10 * (1 + abs(current)) or t < 1e-8:
                break
            t /= 2
        if np.max(np.abs(candidate - beta)) < 1e-14:
            beta = candidate
            converged = np.max(np.abs(score)) / max(n, 1) < np.sqrt(tol)
            break
        beta = candidate

    if np.any(np.abs(beta) >= COEF_BOUND):
        separated = True
        logger.warning("Logistic fit hit the coefficient bound (separation); coefficients clamped")
    if not converged:
        logger.warning("Logistic IRLS did not converge in {} iterations", max_iter)
    if fit_intercept:
        return FittedModel("logistic", beta[1:], float(beta[0]), "logit", tuple(columns),
                           converged=converged, separated=separated)
    return FittedModel("logistic", beta, 0.0, "logit", tuple(columns),
                       converged=converged, separated=separated)


def _soft_threshold(rho, lam):
    return np.sign(rho) * max(abs(rho) - lam, 0.0)


def _standardize(X):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    active = scale > 1e-12
    Z = np.zeros_like(X)
    Z[:, active] = (X[:, active] - center[active]) / scale[active]
    return Z, center, np.where(active, scale, 1.0), active


def _lambda_max(Z, y):
    if Z.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(Z.T @ (y - y.mean()))) / len(y))


def _gram_cd(gram, corr, theta, lam, max_sweeps, tol):
    """
    Coordinate descent on 1/2 theta' gram theta - corr' theta + lam * ||theta[1:]||_1,
    updating theta in place. Coordinate 0 is the unpenalized intercept.

    Each update touches only the p+1 gradient entries, never the rows.
    Sweeps cycle over the active set until it settles and a full sweep
    confirms convergence.
    """
    grad = corr - gram @ theta
    diag = np.diag(gram)
    usable = np.flatnonzero(diag > 0)
    full = True
    for _ in range(max_sweeps):
        coords = usable if full else usable[(usable == 0) | (theta[usable] != 0)]
        delta = 0.0
        for j in coords:
            rho = grad[j] + diag[j] * theta[j]
            new = rho / diag[j] if j == 0 else _soft_threshold(rho, lam) / diag[j]
            step = new - theta[j]
            if step != 0.0:
                grad -= gram[:, j] * step
                theta[j] = new
                delta = max(delta, abs(step))
        if delta < tol:
            if full:
                return theta, True
            full = True
        else:
            full = False
    return theta, False


def _binomial_cd(D, y, theta, lam, max_outer, tol, max_sweeps=1000):
    n = len(y)
    for _ in range(max_outer):
        eta = D @ theta
        mu = expit(eta)
        w = np.maximum(mu * (1 - mu), 1e-5)
        z = eta + (y - mu) / w
        Dw = D * w[:, None]
        previous = theta.copy()
        theta, _ = _gram_cd(Dw.T @ D / n, Dw.T @ z / n, theta, lam, max_sweeps, tol)
        if np.max(np.abs(theta - previous)) < tol:
            return theta, True
    return theta, False


def _path_deviance(D, y, theta, family):
    eta = D @ theta
    if family == "gaussian":
        return float(np.mean((y - eta) ** 2))
    return _binomial_deviance(y, expit(eta), 1.0) / len(y)


def _lasso_path(Z, y, family, lambdas, max_iter, tol, early_stop=True):
    """
    Warm-started fits along the penalty grid, as (intercept, slopes, converged).

    With early_stop, once PATH_MIN_STEPS penalties are fitted and the
    fraction of deviance explained moves by less than PATH_DEV_CHANGE of
    itself, the last fit is carried to the remaining penalties.
    """
    n, p = Z.shape
    D = np.column_stack([np.ones(n), Z])
    theta = np.zeros(p + 1)
    if family == "gaussian":
        gram, corr = D.T @ D / n, D.T @ y / n
        theta[0] = y.mean()
    else:
        theta[0] = logit(float(np.clip(y.mean(), 1e-6, 1 - 1e-6)))
    null_deviance = _path_deviance(D, y, theta, family)
    explained = 0.0
    path = []
    for lam in lambdas:
        if family == "gaussian":
            theta, ok = _gram_cd(gram, corr, theta, lam, 100 * max_iter, tol)
        else:
            theta, ok = _binomial_cd(D, y, theta, lam, max_iter, tol)
        path.append((float(theta[0]), theta[1:].copy(), ok))
        if not early_stop or null_deviance <= 0:
            continue
        previous, explained = explained, 1.0 - _path_deviance(D, y, theta, family) / null_deviance
        settled = explained - previous < PATH_DEV_CHANGE * explained or explained > PATH_DEV_MAX
        if ok and settled and len(path) >= PATH_MIN_STEPS:
            path.extend([path[-1]] * (len(lambdas) - len(path)))
            break
    return path


def _lasso_loss(y, pred, family):
    if family == "gaussian":
        return (y - pred) ** 2
    p = np.clip(pred, 1e-15, 1 - 1e-15)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


def kfold_labels(n, folds, seed):
    """Seeded fold labels 0..folds-1 dealt round-robin over a permutation."""
    rng = np.random.default_rng(int(seed))
    labels = np.empty(n, dtype=int)
    labels[rng.permutation(n)] = np.arange(n) % folds
    return labels


def _to_original_scale(b0, beta, center, scale, active):
    coef = np.zeros_like(beta)
    coef[active] = beta[active] / scale[active]
    return b0 - float(coef @ center), coef


def fit_lasso_cd(X, y, family="gaussian", penalty=None, n_lambda=50, lambda_min_ratio=1e-3,
                 cv_folds=5, seed=0, max_iter=100, tol=1e-7, columns=()):
    """
    Lasso by cyclic coordinate descent with an unpenalized intercept.

    Without an explicit penalty, the penalty is chosen by cv_folds-fold
    cross-validation over n_lambda log-spaced values from lambda_max (all
    slopes zero) down to lambda_min_ratio * lambda_max.

    Args:
        X (array-like): Covariates, shape (n, p)
        y (array-like): Response (0/1 for binomial)
        family (str): 'gaussian' or 'binomial'
        penalty (float, optional): Fixed penalty; skips cross-validation
        n_lambda (int): Grid length
        lambda_min_ratio (float): Grid floor relative to lambda_max
        cv_folds (int): Internal cross-validation folds
        seed (int): Seed for the internal fold split
        max_iter (int): Outer iteration cap
        tol (float): Coordinate change tolerance
        columns (tuple): Covariate names

    Returns:
        FittedModel: Model at the selected penalty
    """
    if family not in ("gaussian", "binomial"):
        raise ConfigError(f"unknown family '{family}'")
    y = np.asarray(y, dtype=float)
    X = _as_matrix(X, len(y))
    link = "logit" if family == "binomial" else "identity"
    Z, center, scale, active = _standardize(X)

    if penalty is not None:
        lambdas = np.array([float(penalty)])
        chosen = 0
    else:
        lam_max = _lambda_max(Z, y)
        if lam_max <= 0:
            lambdas = np.array([0.0])
            chosen = 0
        else:
            lambdas = lam_max * np.logspace(0, np.log10(lambda_min_ratio), n_lambda)
            chosen = _cv_lambda(X, y, family, lambdas, cv_folds, seed, max_iter, tol)

    path = _lasso_path(Z, y, family, lambdas[: chosen + 1], max_iter, tol, early_stop=False)
    b0, beta, ok = path[-1]
    if not ok:
        logger.warning("Lasso coordinate descent did not converge at lambda={:.3g}", lambdas[chosen])
    intercept, coef = _to_original_scale(b0, beta, center, scale, active)
    return FittedModel("lasso", coef, float(intercept), link, tuple(columns),
                       converged=ok, penalty=float(lambdas[chosen]))


def _cv_lambda(X, y, family, lambdas, cv_folds, seed, max_iter, tol):
    n = len(y)
    folds = min(cv_folds, n)
    labels = kfold_labels(n, folds, seed)
    losses = np.zeros(len(lambdas))
    for k in range(folds):
        train = labels != k
        Z, center, scale, active = _standardize(X[train])
        path = _lasso_path(Z, y[train], family, lambdas, max_iter, tol)
        for i, (b0, beta, _) in enumerate(path):
            intercept, coef = _to_original_scale(b0, beta, center, scale, active)
            eta = intercept + X[~train] @ coef
            pred = expit(eta) if family == "binomial" else eta
            losses[i] += _lasso_loss(y[~train], pred, family).sum()
    return int(np.argmin(losses))


def fit_mean(y):
    """Intercept-only model predicting the sample mean."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise EstimationError("cannot fit a mean to empty input")
    return FittedModel("mean", np.zeros(0), float(y.mean()), "identity")


def known_constant(p):
    """Model predicting a known probability p everywhere."""
    if not 0.0 < p < 1.0:
        raise ConfigError(f"known probability must lie in (0, 1), got {p}")
    return FittedModel("constant", np.zeros(0), float(p), "identity")


def fit_learner(spec, X, y, family="gaussian", seed=0, columns=()):
    """
    Fit one LearnerSpec.

    Args:
        spec (LearnerSpec): Learner to fit
        X (array-like): Covariates
        y (array-like): Response
        family (str): 'gaussian' or 'binomial'
        seed (int): Seed for learners with internal randomness
        columns (tuple): Covariate names

    Returns:
        FittedModel: Fitted model
    """
    if spec.kind == "ols":
        if family != "gaussian":
            raise ConfigError("ols learner only fits gaussian responses; use logistic")
        return fit_ols(X, y, columns=columns)
    if spec.kind == "logistic":
        if family != "binomial":
            raise ConfigError("logistic learner only fits binomial responses; use ols")
        return fit_logistic_irls(X, y, max_iter=spec.max_iter, tol=spec.tol, columns=columns)
    if spec.kind == "lasso":
        return fit_lasso_cd(X, y, family, n_lambda=spec.n_lambda, lambda_min_ratio=spec.lambda_min_ratio,
                            cv_folds=spec.cv_folds, seed=seed, max_iter=spec.max_iter, columns=columns)
    if spec.kind == "mean":
        return fit_mean(y)
    return known_constant(spec.p)


def _risk(y, pred, loss, floor):
    if loss == "squared":
        return (y - pred) ** 2
    p = bound_probability(pred, floor)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


def discrete_super_learner(specs, X, y, loss="squared", folds=5, seed=0,
                           floor=PROBABILITY_FLOOR, columns=()):
    """
    Choose the learner with the smallest cross-validated risk and refit it on
    all rows. Ties go to the earlier spec.

    Selections are memoized on the content of the inputs (up to
    SELECTION_CACHE_SIZE entries), so estimators sharing a fold plan and seed
    reuse each other's fits, including the lasso penalty paths.

    Args:
        specs (sequence of LearnerSpec): Candidate library
        X (array-like): Covariates
        y (array-like): Response
        loss (str): 'squared' or 'negloglik'
        folds (int): Cross-validation folds, at least 2
        seed (int): Seed for the fold split and learner internals
        floor (float): Probability floor used in the negloglik risk
        columns (tuple): Covariate names

    Returns:
        SuperLearnerSelection: Chosen spec, per-spec risks and the refit model
    """
    specs = tuple(specs)
    if not specs:
        raise ConfigError("super learner needs at least one learner")
    if loss not in LOSSES:
        raise ConfigError(f"unknown loss '{loss}'")
    if folds < 2:
        raise ConfigError("super learner needs at least 2 folds")
    family = "gaussian" if loss == "squared" else "binomial"
    for spec in specs:
        if (spec.kind == "ols" and family == "binomial") or (spec.kind == "logistic" and family == "gaussian"):
            raise ConfigError(f"learner {spec.label} does not fit a {family} response")

    y = np.asarray(y, dtype=float)
    X = _as_matrix(X, len(y))
    n = len(y)
    if n == 0:
        raise EstimationError("super learner received no rows")

    key = joblib.hash((specs, X, y, loss, folds, seed, floor, tuple(columns)))
    if key in _selection_cache:
        _selection_cache.move_to_end(key)
        return _selection_cache[key]
    selection = _select(specs, X, y, family, loss, folds, seed, floor, columns)
    _selection_cache[key] = selection
    if len(_selection_cache) > SELECTION_CACHE_SIZE:
        _selection_cache.popitem(last=False)
    return selection


def clear_selection_cache():
    """Forget every cached super learner selection."""
    _selection_cache.clear()


def _select(specs, X, y, family, loss, folds, seed, floor, columns):
    n = len(y)
    if len(specs) == 1:
        only = specs[0]
        model = fit_learner(only, X, y, family, seed, columns)
        train_risk = float(_risk(y, model.predict(X), loss, floor).mean())
        return SuperLearnerSelection(only, {}, model, train_risk)

    labels = kfold_labels(n, min(folds, n), seed)
    risks = {}
    for spec in specs:
        try:
            losses = np.empty(n)
            for k in range(min(folds, n)):
                train = labels != k
                model = fit_learner(spec, X[train], y[train], family, seed, columns)
                losses[~train] = _risk(y[~train], model.predict(X[~train]), loss, floor)
            risk = float(losses.mean())
        except (EstimationError, linalg.LinAlgError, FloatingPointError) as e:
            logger.warning("Learner {} failed during cross-validation: {}", spec.label, e)
            continue
        if np.isfinite(risk):
            risks[spec] = risk
    if not risks:
        raise EstimationError("every learner in the library failed")

    chosen = None
    for spec in specs:
        if spec in risks and (chosen is None or risks[spec] < risks[chosen]):
            chosen = spec
    model = fit_learner(chosen, X, y, family, seed, columns)
    return SuperLearnerSelection(chosen, risks, model)
