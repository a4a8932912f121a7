"""
TMLE and CV-TMLE machinery: nuisance fits per (fold, experiment), the
logistic fluctuation in both targeting modes, ATE plug-ins and efficient
influence curves.

Outcomes are min-max scaled per experiment. In 'clever' mode the fluctuation
covariate is H = Delta/g_Delta(A) * (A/g1 - (1-A)/g0) with unit weights and
the update shifts logit Q(a, W) by eps * H(a, W). In 'weights' mode the
covariate is sign(H) with weights |H| and the update shifts by +/- eps. Both
solve sum H * (Y - Q*) = 0.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from scipy.special import expit, logit

from fusion_select.data import DataTable, OutcomeScale, fit_scale, make_folds
from fusion_select.exceptions import ConfigError, DataError, EstimationError
from fusion_select.inference import wald_interval
from fusion_select.learners import (
    FittedModel,
    bound_probability,
    discrete_super_learner,
    fit_logistic_irls,
    fit_mean,
    known_constant,
)

MODES = ("weights", "clever")
TARGETS = ("ate_of_A", "ate_of_S_on_controls", "nco_ate", "did_nco")
TARGET_TOL = 1e-10
NUISANCE_TAGS = {"Q_pooled": 0, "Q_by_study": 1, "Q_nco": 2, "g_a": 3, "g_s": 4, "g_delta": 5}
MIN_MISSING_FOR_MODEL = 5

CERTAIN = FittedModel("constant", np.zeros(0), 1.0, "identity")


def learner_seed(seed, v, s, tag):
    """Seed for one nuisance fit, derived from (seed, fold, experiment, nuisance)."""
    entropy = [int(seed), int(v or 0), int(s), NUISANCE_TAGS[tag]]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _outcome_design(W, a):
    a = np.broadcast_to(np.asarray(a, dtype=float), (W.shape[0],))
    return np.column_stack([a, W])


def _outcome_family(y_scaled):
    return "binomial" if np.all(np.isin(y_scaled, (0.0, 1.0))) else "gaussian"


def _library_for(library, family):
    """Swap ols/logistic so the library matches the outcome family."""
    old, new = ("logistic", "ols") if family == "gaussian" else ("ols", "logistic")
    specs = []
    for spec in library:
        spec = replace(spec, kind=new) if spec.kind == old else spec
        if spec not in specs:
            specs.append(spec)
    return tuple(specs)


@dataclass(frozen=True, eq=False)
class NuisanceFits:
    """
    Nuisance models of one experiment {0, s}, trained on one fold's
    experiment-selection set (or on all rows when fold is None).
    """

    experiment: int
    fold: Optional[int]
    scale: OutcomeScale
    Q_pooled: FittedModel
    Q_by_study: FittedModel
    g_a: FittedModel
    g_s: FittedModel
    floor: float
    outcome_bound: float
    study_column: bool = False
    Q_nco: Optional[FittedModel] = None
    nco_scale: Optional[OutcomeScale] = None
    g_delta: Optional[FittedModel] = None
    selections: Dict[str, dict] = field(default_factory=dict)

    def _bound(self, q):
        return np.clip(q, self.outcome_bound, 1 - self.outcome_bound)

    def _mechanism(self, model, X):
        p = model.predict(X)
        if model.kind == "constant":
            return p
        return bound_probability(p, self.floor)

    def q(self, W, a):
        """Scaled Q^{0,s}(a, W)."""
        return self._bound(self.Q_pooled.predict(_outcome_design(W, a)))

    def q_study(self, W, a=0, study=0):
        """Scaled Q^s(S=study, a, W); study=1 flags the external dataset."""
        X = _outcome_design(W, a)
        if self.study_column:
            X = np.column_stack([X, np.full(X.shape[0], float(study))])
        return self._bound(self.Q_by_study.predict(X))

    def q_nco(self, W, a):
        return self._bound(self.Q_nco.predict(_outcome_design(W, a)))

    def g1(self, W):
        """P(A=1 | S in {0,s}, W), floored."""
        return self._mechanism(self.g_a, W)

    def g_s0(self, W):
        """P(S=0 | S in {0,s}, A=0, W), floored unless known to be 1."""
        return self._mechanism(self.g_s, W)

    def g_s0_raw(self, W):
        return self.g_s.predict(W)

    def g_delta_at(self, a):
        """P(Delta=1 | A=a) for an array of treatment values."""
        a = np.asarray(a, dtype=float)
        if self.g_delta is None:
            return np.ones(a.shape[0])
        return self._mechanism(self.g_delta, a.reshape(-1, 1))


def _fit_regression(name, library, X, y, family, config, seed, columns, selections):
    loss = "squared" if family == "gaussian" else "negloglik"
    selection = discrete_super_learner(library, X, y, loss=loss, folds=config.sl_folds,
                                       seed=seed, floor=config.floor, columns=columns)
    selections[name] = selection.to_dict()
    logger.debug("{}: chose {}", name, selection.chosen.label)
    return selection.model


def fit_nuisances(data, folds, v, s, config, seed=0):
    """
    Fit every nuisance model of experiment {0, s} on fold v's
    experiment-selection set.

    Args:
        data (DataTable): Observations
        folds (FoldPlan, optional): Fold plan; None trains on all rows
        v (int, optional): Fold label
        s (int): Experiment, 0 for the trial alone
        config (EstimatorConfig): Learner libraries and bounds
        seed (int): Base seed

    Returns:
        NuisanceFits: Fitted models
    """
    experiment = data.experiment_mask(s)
    train = experiment if folds is None or v is None else experiment & folds.selection(v)
    where = f"fold {v}, experiment {s}"
    a = data.A[train]
    if not np.any(a == 1):
        raise EstimationError(f"{where}: no treated rows in the training set")
    if not np.any(a == 0):
        raise EstimationError(f"{where}: no control rows in the training set")

    scale = fit_scale(data.Y[experiment])
    W = data.W[train]
    S = data.S[train]
    names = data.covariate_names
    observed = data.observed[train] == 1
    selections = {}

    y = scale.apply(data.Y[train][observed])
    family = _outcome_family(y)
    library = _library_for(config.outcome_library, family)
    X = _outcome_design(W[observed], a[observed])
    columns = ("A",) + names
    Q_pooled = _fit_regression("Q_pooled", library, X, y, family, config,
                               learner_seed(seed, v, s, "Q_pooled"), columns, selections)

    study_column = bool(s > 0 and np.any(S[observed] == s))
    if study_column:
        Xs = np.column_stack([X, (S[observed] == s).astype(float)])
        Q_by_study = _fit_regression("Q_by_study", library, Xs, y, family, config,
                                     learner_seed(seed, v, s, "Q_by_study"), columns + ("S",), selections)
    else:
        Q_by_study = Q_pooled

    if s == 0 and config.rand_prob is not None:
        g_a = known_constant(config.rand_prob)
        selections["g_a"] = {"chosen": f"constant({config.rand_prob:g})", "cv_risks": None}
    else:
        g_a = _fit_regression("g_a", config.treatment_library, W, a.astype(float), "binomial", config,
                              learner_seed(seed, v, s, "g_a"), names, selections)

    controls = a == 0
    if s > 0 and np.any(S[controls] == s):
        g_s = _fit_regression("g_s", config.selection_library, W[controls], (S[controls] == 0).astype(float),
                              "binomial", config, learner_seed(seed, v, s, "g_s"), names, selections)
    else:
        g_s = CERTAIN

    g_delta = None
    if data.has_missingness:
        missing = int((~observed).sum())
        if missing == 0:
            g_delta = CERTAIN
        elif missing < MIN_MISSING_FOR_MODEL:
            g_delta = fit_mean(observed.astype(float))
        else:
            g_delta = fit_logistic_irls(a.reshape(-1, 1), observed.astype(float), columns=("A",))

    Q_nco, nco_scale = None, None
    if data.has_nco:
        try:
            nco_scale = fit_scale(data.nco[experiment])
        except DataError:
            logger.debug("{}: negative control outcome is constant", where)
        if nco_scale is not None:
            finite = np.isfinite(data.nco[train])
            y_nco = nco_scale.apply(data.nco[train][finite])
            nco_family = _outcome_family(y_nco)
            Q_nco = _fit_regression("Q_nco", _library_for(config.nco_library, nco_family),
                                    _outcome_design(W[finite], a[finite]), y_nco, nco_family, config,
                                    learner_seed(seed, v, s, "Q_nco"), columns, selections)

    return NuisanceFits(
        experiment=int(s),
        fold=v,
        scale=scale,
        Q_pooled=Q_pooled,
        Q_by_study=Q_by_study,
        g_a=g_a,
        g_s=g_s,
        floor=config.floor,
        outcome_bound=config.outcome_bound,
        study_column=study_column,
        Q_nco=Q_nco,
        nco_scale=nco_scale,
        g_delta=g_delta,
        selections=selections,
    )


@dataclass(frozen=True)
class Fluctuation:
    """Fitted fluctuation parameter of one targeting step."""

    epsilon: float
    mode: str
    scale: Optional[OutcomeScale] = None
    converged: bool = True


def fluctuate_ate(offsets, h, y_scaled, mode, scale=None, tol=TARGET_TOL):
    """
    Fit the one-parameter logistic fluctuation.

    Args:
        offsets (array-like): logit of the initial Q at the observed treatment
        h (array-like): Clever covariate at the observed treatment
        y_scaled (array-like): Scaled outcomes of the same rows
        mode (str): 'clever' or 'weights'
        scale (OutcomeScale, optional): Scale carried on the result
        tol (float): Mean score tolerance

    Returns:
        Fluctuation: Fitted epsilon
    """
    if mode not in MODES:
        raise ConfigError(f"unknown targeting mode '{mode}'")
    y = np.asarray(y_scaled, dtype=float)
    h = np.asarray(h, dtype=float)
    if y.size == 0:
        raise EstimationError("no observed outcomes to target")
    if np.ptp(y) == 0:
        raise EstimationError("scaled outcome has no variation on the targeting rows")
    if not np.any(h):
        return Fluctuation(0.0, mode, scale)
    if mode == "clever":
        covariate, weights = h, None
    else:
        covariate, weights = np.sign(h), np.abs(h)
    fit = fit_logistic_irls(covariate, y, weights=weights, offset=np.asarray(offsets, dtype=float),
                            fit_intercept=False, tol=tol)
    return Fluctuation(float(fit.coef[0]), mode, scale, fit.converged)


def shift_logit(q, h, fluctuation):
    """Apply a fluctuation to predictions q with clever covariate values h."""
    q = np.asarray(q, dtype=float)
    if fluctuation.epsilon == 0.0:
        return q.copy()
    step = h if fluctuation.mode == "clever" else np.sign(h)
    return expit(logit(q) + fluctuation.epsilon * step)


def clever_covariates(g1, gd1=1.0, gd0=1.0):
    """Clever covariate values H(1, W) and H(0, W)."""
    g1 = np.asarray(g1, dtype=float)
    return 1.0 / (g1 * gd1), -1.0 / ((1.0 - g1) * gd0)


def update_Q(q1, q0, fluctuation, g1, gd1=1.0, gd0=1.0):
    """
    Targeted predictions Q*(1, W) and Q*(0, W).

    Returns:
        tuple: (Q*(1, W), Q*(0, W)) on the scaled outcome
    """
    h1, h0 = clever_covariates(g1, gd1, gd0)
    return shift_logit(q1, h1, fluctuation), shift_logit(q0, h0, fluctuation)


def ate_plugin(q1_star, q0_star, scale=None):
    """Mean of Q*(1, W) - Q*(0, W), on the original outcome scale when scale is given."""
    q1_star = np.asarray(q1_star, dtype=float)
    if q1_star.size == 0:
        raise EstimationError("cannot average over an empty subset")
    d = float(np.mean(q1_star - np.asarray(q0_star, dtype=float)))
    return float(scale.invert_difference(d)) if scale is not None else d


@dataclass(frozen=True, eq=False)
class EicVector:
    """
    Per-row influence curve contributions over the full table.

    values holds the contributions times the prefactor n / |support|, i.e.
    referenced to the whole table; rows outside support are exactly 0.
    """

    name: str
    values: np.ndarray
    support: np.ndarray
    estimate: float

    @classmethod
    def from_contributions(cls, name, support, phi, estimate):
        support = np.asarray(support, dtype=bool)
        n = support.size
        values = np.zeros(n)
        m = int(support.sum())
        if m:
            values[support] = np.asarray(phi, dtype=float) * (n / m)
        return cls(name, values, support, float(estimate))

    @classmethod
    def zeros(cls, name, n, support=None, estimate=0.0):
        support = np.zeros(n, dtype=bool) if support is None else np.asarray(support, dtype=bool)
        return cls(name, np.zeros(n), support, float(estimate))

    @property
    def n(self):
        return self.values.size

    def contributions(self):
        """Contributions without the prefactor (single-support vectors)."""
        m = int(self.support.sum())
        if m == 0:
            return np.zeros(self.n)
        return self.values * (m / self.n)

    def over(self, reference):
        """Contributions referenced to a sub-population, on its rows."""
        reference = np.asarray(reference, dtype=bool)
        if np.any(self.support & ~reference):
            raise ValueError(f"{self.name}: support extends outside the reference rows")
        return self.values[reference] * (reference.sum() / self.n)

    def __add__(self, other):
        return EicVector(f"{self.name}+{other.name}", self.values + other.values,
                         self.support | other.support, self.estimate + other.estimate)

    def __sub__(self, other):
        return EicVector(f"{self.name}-{other.name}", self.values - other.values,
                         self.support | other.support, self.estimate - other.estimate)


def eic_ate(support, a, y_scaled, observed, q1_star, q0_star, g1, estimate_scaled, scale,
            gd1=1.0, gd0=1.0, name="ate"):
    """
    Efficient influence curve of the ATE on the rows in support.

    Arrays other than support are given over the support rows. The residual
    term is weighted by Delta / g_Delta(A) when outcomes are missing.

    Returns:
        EicVector: Contributions on the original outcome scale
    """
    h1, h0 = clever_covariates(g1, gd1, gd0)
    treated = np.asarray(a) == 1
    q_obs = np.where(treated, q1_star, q0_star)
    h = np.where(treated, h1, h0)
    residual = np.where(observed, np.nan_to_num(y_scaled) - q_obs, 0.0)
    phi = scale.width * (h * residual + q1_star - q0_star - estimate_scaled)
    return EicVector.from_contributions(name, support, phi, scale.width * estimate_scaled)


@dataclass(frozen=True)
class _AteRows:
    rows: np.ndarray
    a: np.ndarray
    y: np.ndarray
    observed: np.ndarray
    q1: np.ndarray
    q0: np.ndarray
    g1: np.ndarray
    gd1: np.ndarray
    gd0: np.ndarray
    scale: OutcomeScale

    def targeting_inputs(self):
        h1, h0 = clever_covariates(self.g1, self.gd1, self.gd0)
        treated = self.a == 1
        keep = self.observed
        offsets = logit(np.where(treated, self.q1, self.q0))[keep]
        h = np.where(treated, h1, h0)[keep]
        return offsets, h, self.y[keep]


def target_rows(data, s, outcome="Y"):
    """Rows of experiment s usable for an ATE of the given outcome."""
    mask = data.experiment_mask(s)
    if outcome == "NCO":
        mask = mask & np.isfinite(data.nco)
    return mask


def _ate_rows(data, fits, rows, outcome):
    W = data.W[rows]
    a = data.A[rows]
    if outcome == "Y":
        scale = fits.scale
        y = scale.apply(data.Y[rows])
        observed = data.observed[rows] == 1
        q1, q0 = fits.q(W, 1), fits.q(W, 0)
        gd1, gd0 = fits.g_delta_at(np.ones(a.size)), fits.g_delta_at(np.zeros(a.size))
    else:
        scale = fits.nco_scale
        y = scale.apply(data.nco[rows])
        observed = np.ones(a.size, dtype=bool)
        q1, q0 = fits.q_nco(W, 1), fits.q_nco(W, 0)
        gd1 = gd0 = np.ones(a.size)
    return _AteRows(rows, a, y, observed, q1, q0, fits.g1(W), gd1, gd0, scale)


def _fluctuate(parts, mode):
    inputs = [part.targeting_inputs() for part in parts]
    offsets = np.concatenate([i[0] for i in inputs])
    h = np.concatenate([i[1] for i in inputs])
    y = np.concatenate([i[2] for i in inputs])
    return fluctuate_ate(offsets, h, y, mode, parts[0].scale)


def _targeted_estimate(part, fluctuation, name):
    q1s, q0s = update_Q(part.q1, part.q0, fluctuation, part.g1, part.gd1, part.gd0)
    estimate_scaled = ate_plugin(q1s, q0s)
    return eic_ate(part.rows, part.a, part.y, part.observed, q1s, q0s, part.g1, estimate_scaled,
                   part.scale, part.gd1, part.gd0, name)


@dataclass(frozen=True, eq=False)
class AteTmle:
    """Single-sample TMLE of an ATE with its influence curve."""

    estimate: float
    eic: EicVector
    fluctuation: Optional[Fluctuation]


def tmle_ate(data, fits, rows, mode, outcome="Y", name="ate"):
    """
    TMLE of the ATE of A on the rows given, targeted on those rows.

    Args:
        data (DataTable): Observations
        fits (NuisanceFits): Nuisance models of the experiment
        rows (np.ndarray): Boolean mask; restricted to the experiment's rows
        mode (str): Targeting mode
        outcome (str): 'Y' or 'NCO'
        name (str): Label of the influence curve

    Returns:
        AteTmle: Estimate on the original scale and its EIC
    """
    rows = np.asarray(rows, dtype=bool) & target_rows(data, fits.experiment, outcome)
    if outcome == "NCO" and fits.nco_scale is None:
        return AteTmle(0.0, EicVector.zeros(name, data.n, rows), None)
    if not rows.any():
        raise EstimationError(f"experiment {fits.experiment} has no rows to target")
    part = _ate_rows(data, fits, rows, outcome)
    fluctuation = _fluctuate([part], mode)
    eic = _targeted_estimate(part, fluctuation, name)
    return AteTmle(eic.estimate, eic, fluctuation)


@dataclass(frozen=True, eq=False)
class CvAte:
    """
    Cross-validated TMLE of an ATE for one experiment: one pooled epsilon
    over all estimation sets, one plug-in and influence curve per fold.
    """

    experiment: int
    outcome: str
    fluctuation: Optional[Fluctuation]
    fold_estimates: Dict[int, float]
    eics: Dict[int, EicVector]

    @property
    def estimate(self):
        return float(np.mean([self.fold_estimates[v] for v in sorted(self.fold_estimates)]))

    @property
    def n_rows(self):
        return int(sum(e.support.sum() for e in self.eics.values()))

    def fold_variances(self):
        return {v: float(np.var(e.contributions()[e.support])) for v, e in sorted(self.eics.items())}

    @property
    def variance(self):
        """(1/V) sum_v var_v(EIC) / n, n the experiment's row count."""
        return float(np.mean(list(self.fold_variances().values())) / self.n_rows)

    def wald(self, alpha=0.05, method="wald"):
        return wald_interval(self.estimate, self.variance, alpha, method)

    def minus(self, other):
        """Fold-wise difference, e.g. the outcome ATE minus the NCO ATE."""
        return CvAte(
            self.experiment,
            f"{self.outcome}-{other.outcome}",
            self.fluctuation,
            {v: self.fold_estimates[v] - other.fold_estimates[v] for v in self.fold_estimates},
            {v: self.eics[v] - other.eics[v] for v in self.eics},
        )


def targeted_cv_ate(data, folds, fits_by_fold, s, mode, outcome="Y"):
    """
    Pool all estimation sets of experiment s, fit one epsilon using offsets
    from the models trained on each row's selection set, then compute each
    fold's targeted plug-in on its own estimation set.

    Args:
        data (DataTable): Observations
        folds (FoldPlan): Fold plan
        fits_by_fold (dict): Fold label -> NuisanceFits of experiment s
        s (int): Experiment
        mode (str): Targeting mode
        outcome (str): 'Y' or 'NCO'

    Returns:
        CvAte: Pooled-epsilon CV-TMLE
    """
    in_experiment = target_rows(data, s, outcome)
    name = "ate" if outcome == "Y" else "nco_ate"
    masks = {}
    for v in folds.folds():
        rows = folds.estimation(v) & in_experiment
        if not rows.any():
            raise EstimationError(f"fold {v} has no estimation rows in experiment {s}")
        masks[v] = rows

    if outcome == "NCO" and any(fits_by_fold[v].nco_scale is None for v in masks):
        zero = {v: EicVector.zeros(name, data.n, rows) for v, rows in masks.items()}
        return CvAte(s, outcome, None, {v: 0.0 for v in masks}, zero)

    parts = {v: _ate_rows(data, fits_by_fold[v], rows, outcome) for v, rows in masks.items()}
    fluctuation = _fluctuate(list(parts.values()), mode)
    eics = {v: _targeted_estimate(part, fluctuation, name) for v, part in parts.items()}
    logger.debug("Experiment {} {}: pooled epsilon {:.6g}", s, outcome, fluctuation.epsilon)
    return CvAte(s, outcome, fluctuation, {v: e.estimate for v, e in eics.items()}, eics)


@dataclass(frozen=True, eq=False)
class CvtmleResult:
    """Standard CV-TMLE with an influence-curve Wald interval."""

    target: str
    experiment: int
    cv_ate: CvAte
    ci: object
    variance: float

    @property
    def estimate(self):
        return self.cv_ate.estimate

    def to_dict(self):
        return {
            "target": self.target,
            "experiment": self.experiment,
            "estimate": self.estimate,
            "variance": self.variance,
            "ci": self.ci.to_dict(),
            "fold_estimates": {str(v): e for v, e in sorted(self.cv_ate.fold_estimates.items())},
        }


def _experiment_of(data, s):
    if s is not None:
        if s != 0 and s not in data.external_sources:
            raise ConfigError(f"external dataset S={s} is not present")
        return int(s)
    sources = data.external_sources
    if not sources:
        return 0
    if len(sources) == 1:
        return sources[0]
    raise ConfigError(f"several external datasets present {sources}; choose one")


def fit_all_folds(data, folds, s, config, seed):
    """Nuisance fits of experiment s for every fold, in parallel when configured."""
    fitted = Parallel(n_jobs=config.n_jobs)(
        delayed(fit_nuisances)(data, folds, v, s, config, seed) for v in folds.folds()
    )
    return dict(zip(folds.folds(), fitted))


def _controls_as_study_contrast(data, s):
    controls = data.subset(data.experiment_mask(s) & (data.A == 0))
    return DataTable(
        W=controls.W,
        S=np.zeros(controls.n),
        A=(controls.S == s).astype(float),
        Y=controls.Y,
        covariate_names=controls.covariate_names,
        delta=controls.delta,
        discrete=controls.discrete,
    )


def _nco_as_outcome(data):
    return DataTable(
        W=data.W,
        S=data.S,
        A=data.A,
        Y=data.nco,
        covariate_names=data.covariate_names,
        discrete=data.discrete,
    )


def cvtmle_standard(data, V, target, config, seed=0, s=None, alpha=0.05):
    """
    Standard CV-TMLE: nuisances on each fold's selection set, targeting
    pooled over estimation sets, influence-curve Wald interval.

    Args:
        data (DataTable): Observations
        V (int): Number of folds
        target (str): ate_of_A, ate_of_S_on_controls, nco_ate or did_nco
        config (EstimatorConfig): Estimator settings
        seed (int): Seed for folds and learners
        s (int, optional): Experiment; inferred when the table holds at most one external dataset
        alpha (float): Two-sided level

    Returns:
        CvtmleResult: Estimate, variance and interval
    """
    if target not in TARGETS:
        raise ConfigError(f"unknown target '{target}'; valid targets: {', '.join(TARGETS)}")
    s = _experiment_of(data, s)

    if target == "ate_of_S_on_controls":
        if s == 0:
            raise ConfigError("ate_of_S_on_controls needs an external dataset")
        work = _controls_as_study_contrast(data, s)
        result = cvtmle_standard(work, V, "ate_of_A", replace(config, rand_prob=None), seed, 0, alpha)
        return replace(result, target=target, experiment=s)

    if target in ("nco_ate", "did_nco"):
        if not data.has_nco:
            raise ConfigError(f"{target} needs an NCO column")
        keep = data.experiment_mask(s) & np.isfinite(data.nco)
        dropped = int(data.experiment_mask(s).sum() - keep.sum())
        if dropped:
            logger.warning("Excluded {} rows with a missing negative control outcome", dropped)
        work = data.subset(keep)
        if target == "nco_ate":
            work = _nco_as_outcome(work)
    else:
        work = data.subset(data.experiment_mask(s))

    folds = make_folds(work, V, seed)
    fits = fit_all_folds(work, folds, s, config, seed)
    cv_ate = targeted_cv_ate(work, folds, fits, s, config.mode, "Y")
    if target == "did_nco":
        cv_ate = cv_ate.minus(targeted_cv_ate(work, folds, fits, s, config.mode, "NCO"))
    variance = cv_ate.variance
    ci = wald_interval(cv_ate.estimate, variance, alpha, "wald")
    return CvtmleResult(target, s, cv_ate, ci, variance)
