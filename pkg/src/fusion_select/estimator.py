"""
Experiment-selector CV-TMLE.

For every fold v and candidate experiment s, nuisances are fit on the
selection set v^c, where the selector compares variance and bias. Each
candidate is then targeted once over all estimation sets, and the fold's
estimate is the targeted plug-in of the experiment selected on v^c.
psi_n is the average over folds.
"""

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from fusion_select.bias import BiasEstimates, estimate_bias
from fusion_select.config import EstimatorConfig
from fusion_select.data import FoldPlan, make_folds
from fusion_select.exceptions import ConfigError
from fusion_select.selector import SelectorTrace, parse_selector, select_experiment, uses_nco, variance_term
from fusion_select.tmle import AteTmle, CvAte, NuisanceFits, fit_nuisances, targeted_cv_ate, tmle_ate


@dataclass(frozen=True, eq=False)
class SelectionStep:
    """Work done for one (fold, candidate) pair on the selection set."""

    experiment: int
    fold: int
    fits: NuisanceFits
    ate: AteTmle
    variance_term: float
    bias: BiasEstimates


def selection_step(data, folds, v, s, config, seed, use_nco):
    """
    Fit nuisances of experiment s on fold v's selection set and compute the
    selector inputs there.

    Returns:
        SelectionStep: Fits, selection-set ATE, variance term and bias estimates
    """
    fits = fit_nuisances(data, folds, v, s, config, seed)
    selection = folds.selection(v)
    ate = tmle_ate(data, fits, selection, config.mode)
    term = variance_term(ate.eic.over(selection), data.n)
    bias = estimate_bias(data, selection, fits, config.mode, use_nco)
    return SelectionStep(int(s), int(v), fits, ate, term, bias)


@dataclass(frozen=True, eq=False)
class EsCvtmleRun:
    """Result of one experiment-selector CV-TMLE run."""

    psi_n: float
    fold_estimates: Dict[int, float]
    traces: Tuple[SelectorTrace, ...]
    selector: str
    candidates: Tuple[int, ...]
    folds: FoldPlan
    n: int
    steps: Dict[Tuple[int, int], SelectionStep]
    cv_ates: Dict[int, CvAte]
    config: EstimatorConfig
    seed: int
    warnings: Tuple[str, ...] = ()

    @property
    def all_rct(self):
        return all(trace.chosen == 0 for trace in self.traces)

    @property
    def selected(self):
        return {trace.fold: trace.chosen for trace in self.traces}

    @property
    def variance_terms(self):
        return {key: step.variance_term for key, step in self.steps.items()}

    def bias_term(self, s, v):
        return self.steps[(s, v)].bias.bias_term(self.selector)

    def bias_eic(self, s, v):
        return self.steps[(s, v)].bias.bias_eic(self.selector)

    def learner_selections(self):
        return {
            f"s={s},v={v}": step.fits.selections
            for (s, v), step in sorted(self.steps.items())
        }

    def to_dict(self):
        return {
            "estimate": self.psi_n,
            "selector": self.selector,
            "candidates": list(self.candidates),
            "all_rct": self.all_rct,
            "fold_estimates": {str(v): e for v, e in sorted(self.fold_estimates.items())},
            "folds": [trace.to_dict() for trace in self.traces],
            "bias": [step.bias.to_dict() for _, step in sorted(self.steps.items())],
            "learners": self.learner_selections(),
        }


def run_es_cvtmle(data, V, selector_kind, config, seed=0):
    """
    Run the experiment-selector CV-TMLE.

    Args:
        data (DataTable): Observations, already trimmed to trial support
        V (int): Number of folds
        selector_kind (str): b2v, +nco or nco-only
        config (EstimatorConfig): Estimator settings
        seed (int): Seed for folds and learners

    Returns:
        EsCvtmleRun: Point estimate, per-fold traces and stored influence curves
    """
    kind = parse_selector(selector_kind)
    use_nco = uses_nco(kind)
    if use_nco and not data.has_nco:
        raise ConfigError(f"selector {kind} needs an NCO column")
    candidates = (0,) + tuple(data.external_sources)
    folds = make_folds(data, V, seed)
    pairs = [(v, s) for v in folds.folds() for s in candidates]

    logger.info("Fitting {} fold/experiment pairs", len(pairs))
    results = Parallel(n_jobs=config.n_jobs)(
        delayed(selection_step)(data, folds, v, s, config, seed, use_nco) for v, s in pairs
    )
    steps = {(step.experiment, step.fold): step for step in results}

    traces = []
    for v in folds.folds():
        trace = select_experiment(
            kind,
            {s: steps[(s, v)].bias.bias_term(kind) for s in candidates},
            {s: steps[(s, v)].variance_term for s in candidates},
            config.penalty,
            v,
        )
        logger.debug("Fold {} selected experiment {}", v, trace.chosen)
        traces.append(trace)

    cv_ates = {
        s: targeted_cv_ate(data, folds, {v: steps[(s, v)].fits for v in folds.folds()}, s, config.mode)
        for s in candidates
    }
    fold_estimates = {trace.fold: cv_ates[trace.chosen].fold_estimates[trace.fold] for trace in traces}
    psi_n = float(np.mean([fold_estimates[v] for v in folds.folds()]))

    warnings = list(data.warnings)
    for step in results:
        for message in step.bias.warnings:
            if message not in warnings:
                warnings.append(message)

    return EsCvtmleRun(
        psi_n=psi_n,
        fold_estimates=fold_estimates,
        traces=tuple(traces),
        selector=kind,
        candidates=candidates,
        folds=folds,
        n=data.n,
        steps=steps,
        cv_ates=cv_ates,
        config=config,
        seed=int(seed),
        warnings=tuple(warnings),
    )
