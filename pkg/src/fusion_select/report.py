"""
JSON reports. Output is deterministic: sorted keys, no timestamps, non-finite
numbers written as null.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

SCHEMA_VERSION = 1


def to_jsonable(value):
    """Convert numpy scalars/arrays, tuples and non-finite floats for json."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else None
    return value


def write_json(payload, path):
    """Write payload as pretty, key-sorted JSON and return the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(to_jsonable(payload), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    return str(path)


@dataclass(frozen=True)
class EstimateReport:
    """Everything the analyze command reports for one dataset."""

    estimate: float
    ci: object
    est_var: float
    run: dict
    config: dict
    warnings: Tuple[str, ...] = ()
    selection_frequencies: Optional[dict] = None
    data_summary: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "estimate": self.estimate,
            "est_var": self.est_var,
            "ci": self.ci.to_dict(),
            "selector": self.run["selector"],
            "candidates": self.run["candidates"],
            "all_rct": self.run["all_rct"],
            "fold_estimates": self.run["fold_estimates"],
            "folds": self.run["folds"],
            "bias": self.run["bias"],
            "learners": self.run["learners"],
            "selection_frequencies": self.selection_frequencies,
            "data": self.data_summary,
            "config": self.config,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class ComparisonReport:
    """Results of the compare command."""

    results: List[dict]
    config: dict
    warnings: Tuple[str, ...] = ()

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "results": self.results,
            "config": self.config,
            "warnings": list(self.warnings),
        }
