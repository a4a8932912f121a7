"""
Per-fold experiment selection: variance plus squared bias.
"""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from fusion_select.exceptions import ConfigError, EstimationError

SELECTORS = ("b2v", "+nco", "nco-only")
_ALIASES = {"plus_nco": "+nco", "plus-nco": "+nco", "nco_only": "nco-only", "nco": "nco-only"}


def parse_selector(name):
    """Normalize a selector name; raises ConfigError listing the valid ones."""
    name = _ALIASES.get(str(name).strip().lower(), str(name).strip().lower())
    if name not in SELECTORS:
        raise ConfigError(f"unknown selector '{name}'; valid selectors: {', '.join(SELECTORS)}")
    return name


def uses_nco(kind):
    return parse_selector(kind) != "b2v"


@dataclass(frozen=True)
class SelectorCriterion:
    """Criterion terms of one candidate experiment."""

    kind: str
    experiment: int
    variance_term: float
    bias_term: float
    penalty: float = 1.0

    @property
    def criterion(self):
        return self.variance_term / self.penalty + self.bias_term ** 2

    def to_dict(self):
        return {
            "variance_term": self.variance_term,
            "bias_term": self.bias_term,
            "criterion": self.criterion,
        }


@dataclass(frozen=True)
class SelectorTrace:
    """Selection made on one fold's experiment-selection set."""

    fold: Optional[int]
    chosen: int
    criteria: Dict[int, SelectorCriterion]

    def to_dict(self):
        return {
            "v": self.fold,
            "selected_s": self.chosen,
            "criteria": {str(s): c.to_dict() for s, c in sorted(self.criteria.items())},
        }


def variance_term(contributions, n_total):
    """
    Empirical variance of influence curve contributions divided by n.

    Args:
        contributions (array-like): Per-row contributions over the selection
            set, zero outside the experiment
        n_total (int): Total sample size

    Returns:
        float: Variance term
    """
    contributions = np.asarray(contributions, dtype=float)
    if np.count_nonzero(contributions) < 2:
        raise EstimationError("variance term needs at least two nonzero contributions")
    return float(np.var(contributions) / n_total)


def select_experiment(kind, bias_terms, variance_terms, penalty=1.0, fold=None):
    """
    Choose the candidate minimizing variance_term / c(n) + bias^2.

    Ties go to the smaller experiment label, i.e. towards the trial alone.

    Args:
        kind (str): b2v, +nco or nco-only
        bias_terms (dict): Experiment -> bias term
        variance_terms (dict): Experiment -> variance term
        penalty (float): c(n)
        fold (int, optional): Fold label for the trace

    Returns:
        SelectorTrace: Criteria and the chosen experiment
    """
    kind = parse_selector(kind)
    if not variance_terms:
        raise EstimationError("no candidate experiments to select from")
    criteria = {}
    for s in sorted(variance_terms):
        if variance_terms[s] <= 0:
            raise EstimationError(f"experiment {s}: variance term must be positive")
        criteria[s] = SelectorCriterion(kind, int(s), float(variance_terms[s]), float(bias_terms[s]), penalty)
    chosen = None
    for s, c in criteria.items():
        if chosen is None or c.criterion < criteria[chosen].criterion:
            chosen = s
    return SelectorTrace(fold, int(chosen), criteria)
