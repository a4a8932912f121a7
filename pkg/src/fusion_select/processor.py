"""
End-to-end pipelines behind the analyze, compare and simulate commands.
"""

import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from fusion_select.comparators import METHODS, run_comparator
from fusion_select.data import read_csv, trim_to_rct_support
from fusion_select.estimator import run_es_cvtmle
from fusion_select.exceptions import ConfigError
from fusion_select.inference import confidence_interval, selection_frequencies
from fusion_select.report import ComparisonReport, EstimateReport, write_json
from fusion_select.simulation import (
    DgpConfig,
    SimulationSettings,
    aggregate_log,
    read_log,
    run_replicates,
    write_aggregate,
    write_log,
)

DEFAULT_COMPARATORS = ("welch", "cvtmle-rct", "ttp-ttest", "ttp-cvtmle", "did-nco")
DEFAULT_SIMULATION_ESTIMATORS = ("rct-cvtmle", "rct-ttest", "es-b2v", "es-+nco", "es-nco-only",
                                 "ttp-ttest", "ttp-cvtmle", "did-nco")


def _default_output(input_path, suffix):
    base_path = os.path.splitext(input_path)[0]
    return f"{base_path}_{suffix}.json"


def _load(config):
    if not config.input:
        raise ConfigError("--input is required")
    data = read_csv(config.input)
    if config.trim:
        data = trim_to_rct_support(data)
    return data


def _summary(data):
    return {
        "n": data.n,
        "covariates": list(data.covariate_names),
        "rows_per_source": {str(int(s)): int((data.S == s).sum()) for s in np.unique(data.S)},
        "has_nco": data.has_nco,
        "has_missingness": data.has_missingness,
    }


def analyze(config):
    """
    Run trimming, fold assignment, the experiment-selector CV-TMLE and its
    interval on one CSV file and write the JSON report.

    Args:
        config (RunConfig): Run settings

    Returns:
        str: Path to the written report
    """
    data = _load(config)
    estimator_config = config.estimator_config()
    run = run_es_cvtmle(data, config.folds, config.selector, estimator_config, config.seed)
    ci, est_var, model = confidence_interval(run, config.draws, config.alpha, config.seed, config.threads)
    frequencies = None
    if model is not None:
        frequencies = selection_frequencies(model, config.draws, config.seed, config.threads)

    report = EstimateReport(
        estimate=run.psi_n,
        ci=ci,
        est_var=est_var,
        run=run.to_dict(),
        config={**config.to_dict(), "estimator": estimator_config.to_dict()},
        warnings=run.warnings,
        selection_frequencies=frequencies,
        data_summary=_summary(data),
    )
    output_path = config.output or _default_output(config.input, "report")
    write_json(report.to_dict(), output_path)
    print(f"Report saved to {output_path}")
    return output_path


def compare(config):
    """
    Run the requested comparators on one CSV file, once per external
    dataset (or once on the trial when there is none).

    Returns:
        str: Path to the written JSON table; a CSV copy sits next to it
    """
    methods = config.estimators or DEFAULT_COMPARATORS
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method '{unknown[0]}'; valid methods: {', '.join(METHODS)}")
    data = _load(config)
    if "did-nco" in methods and not data.has_nco:
        if config.estimators:
            raise ConfigError("did-nco needs an NCO column")
        logger.info("No NCO column; skipping did-nco")
        methods = tuple(m for m in methods if m != "did-nco")

    estimator_config = config.estimator_config()
    sources = data.external_sources or (None,)
    results = []
    for s in sources:
        for method in methods:
            print(f"Running {method} (external dataset {s if s is not None else 'none'})...")
            result = run_comparator(method, data, s, config.folds, estimator_config, config.seed, config.alpha)
            results.append({"dataset": s, **result.to_dict()})

    output_path = config.output or _default_output(config.input, "compare")
    report = ComparisonReport(results, config.to_dict(), data.warnings)
    write_json(report.to_dict(), output_path)
    flat = [{k: v for k, v in row.items() if k != "ci"} | _flat_ci(row["ci"]) for row in results]
    pd.DataFrame(flat).to_csv(f"{os.path.splitext(output_path)[0]}.csv", index=False)
    print(f"Report saved to {output_path}")
    return output_path


def _flat_ci(ci):
    if ci is None:
        return {"ci_lower": None, "ci_upper": None}
    return {"ci_lower": ci["lower"], "ci_upper": ci["upper"]}


def simulate(config):
    """
    Run simulation replicates (or re-aggregate an existing log with
    aggregate_only) and write the log and aggregate tables.

    Returns:
        str: Path to the aggregate JSON
    """
    out_dir = Path(config.output or "simulation")
    log_path = out_dir / "replicates.csv"
    dgp = DgpConfig().with_overrides(config.dgp)

    if config.aggregate_only:
        if not log_path.exists():
            raise ConfigError(f"no simulation log at {log_path}")
        log = read_log(log_path)
        metrics = aggregate_log(log, dgp.ate_true)
        print(f"Re-aggregated {len(log)} log rows from {log_path}")
    else:
        estimator_config = replace(config.estimator_config(), n_jobs=1)
        if estimator_config.rand_prob is None:
            estimator_config = replace(estimator_config, rand_prob=dgp.p_treat)
        settings = SimulationSettings(V=config.folds, draws=config.draws, alpha=config.alpha, config=estimator_config)
        estimators = config.estimators or DEFAULT_SIMULATION_ESTIMATORS
        logger.info("Simulating {} replicates of {} estimators", config.replicates, len(estimators))
        log, metrics = run_replicates(config.replicates, estimators, dgp, settings, config.seed,
                                      config.datasets, n_jobs=config.threads, progress=not config.verbose)
        write_log(log, log_path)
        print(f"Replicate log saved to {log_path}")

    json_path = out_dir / "aggregate.json"
    write_aggregate(metrics, json_path, out_dir / "aggregate.csv")
    print(f"Report saved to {json_path}")
    return str(json_path)
