"""
Simulation harness: synthetic trial plus external controls with injected
bias, a replicate runner and coverage/power aggregation.
"""

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger
from scipy import linalg
from tqdm import tqdm

from fusion_select.comparators import did_nco_cvtmle, test_then_pool_cvtmle, test_then_pool_ttest, welch_ttest_ate
from fusion_select.config import EstimatorConfig
from fusion_select.data import DataTable
from fusion_select.estimator import run_es_cvtmle
from fusion_select.exceptions import ConfigError, FusionSelectError
from fusion_select.inference import confidence_interval
from fusion_select.tmle import cvtmle_standard

LOG_COLUMNS = ["replicate", "estimator", "dataset", "estimate", "ci_lower", "ci_upper",
               "est_var", "selected_experiment_per_fold", "status"]
TRIAL_ONLY = "-"


@dataclass(frozen=True)
class DgpConfig:
    """
    Data-generating process.

    Y = y_intercept + y_coef . W + ate_true * A + B1 + B2 + U_Y
    NCO = nco_intercept + nco_coef . W + B1 + U_nco

    External dataset s draws B1 ~ N(b1_share * m_s * B, bias_sd^2) and
    B2 ~ N((1 - b1_share) * m_s * B, bias_sd^2) per row, with m_s its bias
    multiplier; m_s = 0 means no bias at all. Trial rows have B1 = B2 = 0.
    """

    n_rct: int = 150
    n_rwd: int = 500
    p_treat: float = 0.67
    ate_true: float = -0.6
    B: float = 0.21
    bias_multipliers: Tuple[Tuple[int, float], ...] = ((1, 0.0), (2, 1.0), (3, 5.0))
    b1_share: float = 0.75
    bias_sd: float = 0.02
    sd_y: float = 1.5
    sd_nco: float = 1.5
    y_intercept: float = -3.0
    y_coef: Tuple[float, float] = (2.0, 1.0)
    nco_intercept: float = -2.0
    nco_coef: Tuple[float, float] = (1.0, 2.0)

    def __post_init__(self):
        if not 0.0 < self.p_treat < 1.0:
            raise ConfigError("p_treat must lie in (0, 1)")
        if self.n_rct < 2 or self.n_rwd < 1:
            raise ConfigError("n_rct must be at least 2 and n_rwd at least 1")
        if self.sd_y < 0 or self.sd_nco < 0 or self.bias_sd < 0:
            raise ConfigError("standard deviations must be non-negative")

    def multiplier(self, which):
        table = dict(self.bias_multipliers)
        if which not in table:
            raise ConfigError(f"no bias multiplier for external dataset S={which}")
        return table[which]

    def with_overrides(self, overrides):
        """Copy with scalar fields replaced, e.g. {'n_rct': 300, 'B': 0.1}."""
        scalars = {f.name.lower(): f for f in fields(self) if f.type in (int, float)}
        updates = {}
        for key, value in overrides.items():
            target = scalars.get(str(key).lower())
            if target is None:
                raise ConfigError(f"unknown simulation setting '{key}'")
            updates[target.name] = int(value) if target.type is int else float(value)
        return replace(self, **updates)


def draw_bias_terms(config, which, size, rng):
    """Per-row bias terms (B1, B2) of external dataset which."""
    m = config.multiplier(which)
    if m == 0:
        return np.zeros(size), np.zeros(size)
    b1 = rng.normal(config.b1_share * m * config.B, config.bias_sd, size)
    b2 = rng.normal((1 - config.b1_share) * m * config.B, config.bias_sd, size)
    return b1, b2


def _outcomes(config, W, A, b1, b2, rng):
    n = W.shape[0]
    y = (config.y_intercept + W @ np.asarray(config.y_coef) + config.ate_true * A
         + b1 + b2 + rng.normal(0.0, config.sd_y, n))
    nco = config.nco_intercept + W @ np.asarray(config.nco_coef) + b1 + rng.normal(0.0, config.sd_nco, n)
    return y, nco


def generate_dataset(config, which_rwd, seed):
    """
    Draw the trial and one external control dataset.

    The trial rows depend only on seed, so every external dataset of a
    replicate is paired with the same trial.

    Args:
        config (DgpConfig): Data-generating process
        which_rwd (int): External dataset label; 0 returns the trial alone
        seed (int): Replicate seed

    Returns:
        DataTable: Trial rows (S=0) followed by external rows (S=which_rwd)
    """
    rng = np.random.default_rng([int(seed), 0])
    W = rng.normal(size=(config.n_rct, 2))
    A = rng.binomial(1, config.p_treat, config.n_rct).astype(float)
    zeros = np.zeros(config.n_rct)
    y, nco = _outcomes(config, W, A, zeros, zeros, rng)
    S = np.zeros(config.n_rct)

    if which_rwd:
        rng = np.random.default_rng([int(seed), int(which_rwd)])
        W_ext = rng.normal(size=(config.n_rwd, 2))
        A_ext = np.zeros(config.n_rwd)
        b1, b2 = draw_bias_terms(config, which_rwd, config.n_rwd, rng)
        y_ext, nco_ext = _outcomes(config, W_ext, A_ext, b1, b2, rng)
        W = np.vstack([W, W_ext])
        A = np.concatenate([A, A_ext])
        y = np.concatenate([y, y_ext])
        nco = np.concatenate([nco, nco_ext])
        S = np.concatenate([S, np.full(config.n_rwd, float(which_rwd))])

    return DataTable(W=W, S=S, A=A, Y=y, covariate_names=("W1", "W2"), nco=nco)


@dataclass(frozen=True)
class SimulationSettings:
    """Estimator settings shared by every replicate."""

    V: int = 10
    draws: int = 1000
    alpha: float = 0.05
    config: EstimatorConfig = EstimatorConfig(rand_prob=0.67)


@dataclass(frozen=True)
class EstimatorOutcome:
    estimate: float
    lower: float
    upper: float
    est_var: float
    selected: str = ""


def _es(kind):
    def run(data, which, settings, seed):
        es = run_es_cvtmle(data, settings.V, kind, settings.config, seed)
        ci, variance, _ = confidence_interval(es, settings.draws, settings.alpha, seed)
        selected = ";".join(str(es.selected[v]) for v in sorted(es.selected))
        return EstimatorOutcome(es.psi_n, ci.lower, ci.upper, variance, selected)
    return run


def _from_comparator(result):
    return EstimatorOutcome(result.estimate, result.ci.lower, result.ci.upper, result.est_var,
                            "" if result.pooled is None else str(int(result.pooled)))


def _rct_cvtmle(data, which, settings, seed):
    result = cvtmle_standard(data.subset(data.S == 0), settings.V, "ate_of_A", settings.config, seed, 0, settings.alpha)
    return EstimatorOutcome(result.estimate, result.ci.lower, result.ci.upper, result.variance)


def _rct_ttest(data, which, settings, seed):
    return _from_comparator(welch_ttest_ate(data, data.S == 0, settings.alpha))


def _ttp_ttest(data, which, settings, seed):
    return _from_comparator(test_then_pool_ttest(data, which, alpha=settings.alpha))


def _ttp_cvtmle(data, which, settings, seed):
    return _from_comparator(test_then_pool_cvtmle(data, which, settings.V, settings.config, seed, settings.alpha))


def _did_nco(data, which, settings, seed):
    return _from_comparator(did_nco_cvtmle(data, which, settings.V, settings.config, seed, settings.alpha))


ESTIMATORS = {
    "rct-cvtmle": (_rct_cvtmle, True),
    "rct-ttest": (_rct_ttest, True),
    "es-b2v": (_es("b2v"), False),
    "es-+nco": (_es("+nco"), False),
    "es-nco-only": (_es("nco-only"), False),
    "ttp-ttest": (_ttp_ttest, False),
    "ttp-cvtmle": (_ttp_cvtmle, False),
    "did-nco": (_did_nco, False),
}


def resolve_estimators(names):
    """Map names to (label, function, trial_only); callables pass through as (label, fn)."""
    resolved = []
    for item in names:
        if isinstance(item, tuple):
            label, fn = item[:2]
            resolved.append((label, fn, item[2] if len(item) > 2 else False))
            continue
        if item not in ESTIMATORS:
            raise ConfigError(f"unknown estimator '{item}'; valid estimators: {', '.join(ESTIMATORS)}")
        fn, trial_only = ESTIMATORS[item]
        resolved.append((item, fn, trial_only))
    return resolved


def replicate_seed(base_seed, r):
    return int(np.random.SeedSequence([int(base_seed), int(r)]).generate_state(1)[0])


def _log_row(r, label, dataset, outcome=None, status="ok"):
    row = {"replicate": r, "estimator": label, "dataset": dataset, "status": status,
           "estimate": np.nan, "ci_lower": np.nan, "ci_upper": np.nan, "est_var": np.nan,
           "selected_experiment_per_fold": ""}
    if outcome is not None:
        row.update(estimate=outcome.estimate, ci_lower=outcome.lower, ci_upper=outcome.upper,
                   est_var=np.nan if outcome.est_var is None else outcome.est_var,
                   selected_experiment_per_fold=outcome.selected)
    return row


def run_replicate(r, estimators, datasets, dgp, settings, base_seed):
    """Run every estimator on replicate r; failures are logged, not raised."""
    seed = replicate_seed(base_seed, r)
    rows = []
    tables = {which: generate_dataset(dgp, which, seed) for which in datasets}
    for label, fn, trial_only in estimators:
        targets = [(TRIAL_ONLY, 0)] if trial_only else [(str(w), w) for w in datasets]
        for dataset, which in targets:
            data = tables[which] if which else generate_dataset(dgp, 0, seed)
            try:
                rows.append(_log_row(r, label, dataset, fn(data, which, settings, seed)))
            except (FusionSelectError, linalg.LinAlgError, FloatingPointError) as e:
                logger.warning("Replicate {}: {} on dataset {} failed: {}", r, label, dataset, e)
                rows.append(_log_row(r, label, dataset, status=f"failed: {e}"))
    return rows


def run_replicates(R, estimators, dgp=None, settings=None, base_seed=0, datasets=(1, 2, 3),
                   n_jobs=1, progress=True):
    """
    Run R replicates and aggregate.

    Args:
        R (int): Replicate count, at least 1
        estimators (list): Estimator names or (label, fn[, trial_only]) tuples;
            fn(data, which, settings, seed) returns an EstimatorOutcome
        dgp (DgpConfig, optional): Data-generating process
        settings (SimulationSettings, optional): Estimator settings
        base_seed (int): Seed; replicate r depends only on (base_seed, r)
        datasets (tuple): External datasets to pair with the trial
        n_jobs (int): Parallel replicate workers
        progress (bool): Show a progress bar

    Returns:
        tuple: (per-replicate log DataFrame, list of MetricsRow)
    """
    if R < 1:
        raise ConfigError("R must be at least 1")
    dgp = dgp or DgpConfig()
    settings = settings or SimulationSettings(config=EstimatorConfig(rand_prob=dgp.p_treat))
    resolved = resolve_estimators(estimators)
    replicates = tqdm(range(R), desc="Replicates", disable=not progress)
    results = Parallel(n_jobs=n_jobs)(
        delayed(run_replicate)(r, resolved, tuple(datasets), dgp, settings, base_seed) for r in replicates
    )
    log = pd.DataFrame([row for rows in results for row in rows], columns=LOG_COLUMNS)
    return log, aggregate_log(log, dgp.ate_true)


@dataclass(frozen=True)
class MetricsRow:
    """Operating characteristics of one estimator over the replicates."""

    estimator: str
    dataset: str
    replicates: int
    failures: int
    bias: float
    variance: Optional[float]
    mean_est_var: float
    mse: float
    coverage: float
    power: float

    def to_dict(self):
        return asdict(self)


def aggregate_log(log, ate_true=-0.6):
    """
    Aggregate a per-replicate log into one MetricsRow per (estimator, dataset).

    Power is the share of intervals entirely below 0.
    """
    metrics = []
    for (label, dataset), group in log.groupby(["estimator", "dataset"], sort=True):
        ok = group[group["status"] == "ok"]
        failures = int(len(group) - len(ok))
        if ok.empty:
            logger.warning("Estimator {} on dataset {} failed in every replicate", label, dataset)
            continue
        est = ok["estimate"].to_numpy(dtype=float)
        lower = ok["ci_lower"].to_numpy(dtype=float)
        upper = ok["ci_upper"].to_numpy(dtype=float)
        metrics.append(MetricsRow(
            estimator=str(label),
            dataset=str(dataset),
            replicates=int(len(ok)),
            failures=failures,
            bias=float(est.mean() - ate_true),
            variance=float(est.var(ddof=1)) if est.size > 1 else None,
            mean_est_var=float(np.nanmean(ok["est_var"].to_numpy(dtype=float))),
            mse=float(np.mean((est - ate_true) ** 2)),
            coverage=float(np.mean((lower <= ate_true) & (ate_true <= upper))),
            power=float(np.mean(upper < 0)),
        ))
    return metrics


def write_log(log, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    log.to_csv(path, index=False)


def read_log(path):
    """Read a per-replicate log written by write_log."""
    try:
        log = pd.read_csv(path, dtype={"dataset": str, "selected_experiment_per_fold": str},
                          keep_default_na=False, na_values=[""], float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read simulation log {path}: {e}") from e
    missing = [c for c in LOG_COLUMNS if c not in log.columns]
    if missing:
        raise ConfigError(f"simulation log {path} lacks columns: {', '.join(missing)}")
    log["selected_experiment_per_fold"] = log["selected_experiment_per_fold"].fillna("")
    return log


def write_aggregate(metrics, json_path, csv_path):
    """Write the aggregate table as JSON and CSV."""
    records = [m.to_dict() for m in metrics]
    Path(json_path).parent.mkdir(parents=True, exist_ok=True)
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump({"schema_version": 1, "metrics": records}, f, indent=2, sort_keys=True)
        f.write("\n")
    pd.DataFrame(records, columns=[f.name for f in fields(MetricsRow)]).to_csv(csv_path, index=False)
