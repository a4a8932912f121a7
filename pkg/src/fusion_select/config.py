"""
Run and estimator configuration.

Values are resolved from, lowest to highest precedence: dataclass defaults,
a flat key=value config file, FUSION_SELECT_* environment variables (after
loading a .env file) and explicit command-line flags.
"""

import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from fusion_select.exceptions import ConfigError
from fusion_select.learners import PROBABILITY_FLOOR, LearnerSpec

ENV_PREFIX = "FUSION_SELECT_"
MODES = ("weights", "clever")
COMMANDS = ("analyze", "simulate", "compare")


def parse_library(text):
    """Parse a comma separated learner list such as 'lasso,mean'."""
    if isinstance(text, (tuple, list)):
        return tuple(s if isinstance(s, LearnerSpec) else LearnerSpec.parse(s) for s in text)
    names = [part for part in str(text).split(",") if part.strip()]
    if not names:
        raise ConfigError("learner library is empty")
    return tuple(LearnerSpec.parse(name) for name in names)


@dataclass(frozen=True)
class EstimatorConfig:
    """
    Settings shared by every TMLE in a run.

    Args:
        mode (str): Targeting mode, 'weights' (target the weights) or 'clever'
        outcome_library (tuple): Learners for the outcome regressions
        treatment_library (tuple): Learners for the treatment mechanism
        selection_library (tuple): Learners for the study selection mechanism
        nco_library (tuple): Learners for the negative control outcome regression
        rand_prob (float, optional): Known trial randomization probability
        floor (float): Probability floor for mechanism predictions
        outcome_bound (float): Bound on scaled outcome predictions before logit
        sl_folds (int): Super learner cross-validation folds
        penalty (float): Variance penalty c(n) of the selector
        n_jobs (int): Worker count for fold-level parallelism
    """

    mode: str = "weights"
    outcome_library: Tuple[LearnerSpec, ...] = (LearnerSpec("ols"),)
    treatment_library: Tuple[LearnerSpec, ...] = (LearnerSpec("lasso"), LearnerSpec("mean"))
    selection_library: Tuple[LearnerSpec, ...] = (LearnerSpec("lasso"), LearnerSpec("mean"))
    nco_library: Tuple[LearnerSpec, ...] = (LearnerSpec("ols"),)
    rand_prob: Optional[float] = None
    floor: float = PROBABILITY_FLOOR
    outcome_bound: float = 0.0005
    sl_folds: int = 5
    penalty: float = 1.0
    n_jobs: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown targeting mode '{self.mode}'; valid modes: {', '.join(MODES)}")
        if self.rand_prob is not None and not 0.0 < self.rand_prob < 1.0:
            raise ConfigError("randomization probability must lie in (0, 1)")
        if not 0.0 < self.floor < 0.5:
            raise ConfigError("probability floor must lie in (0, 0.5)")
        if not 0.0 < self.outcome_bound < 0.5:
            raise ConfigError("outcome bound must lie in (0, 0.5)")
        if self.sl_folds < 2:
            raise ConfigError("super learner needs at least 2 folds")
        if self.penalty <= 0:
            raise ConfigError("penalty c(n) must be positive")
        for name in ("outcome_library", "treatment_library", "selection_library", "nco_library"):
            if not getattr(self, name):
                raise ConfigError(f"{name} is empty")

    def to_dict(self):
        return {
            "mode": self.mode,
            "outcome_library": [s.label for s in self.outcome_library],
            "treatment_library": [s.label for s in self.treatment_library],
            "selection_library": [s.label for s in self.selection_library],
            "nco_library": [s.label for s in self.nco_library],
            "rand_prob": self.rand_prob,
            "floor": self.floor,
            "outcome_bound": self.outcome_bound,
            "sl_folds": self.sl_folds,
            "penalty": self.penalty,
        }


def _to_bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got '{value}'")


def _to_optional_float(value):
    if value is None or str(value).strip().lower() in ("", "none"):
        return None
    return float(value)


def _to_tuple(value):
    if isinstance(value, (tuple, list)):
        return tuple(value)
    return tuple(part.strip() for part in str(value).split(",") if part.strip())


def _to_int_tuple(value):
    return tuple(int(v) for v in _to_tuple(value))


@dataclass
class RunConfig:
    """Every command-line setting of a run."""

    command: str = "analyze"
    input: Optional[str] = None
    selector: str = "b2v"
    folds: int = 10
    draws: int = 1000
    seed: int = 0
    mode: str = "weights"
    penalty: float = 1.0
    rand_prob: Optional[float] = None
    trim: bool = True
    replicates: int = 100
    estimators: Tuple[str, ...] = ()
    datasets: Tuple[int, ...] = (1, 2, 3)
    output: Optional[str] = None
    threads: int = 1
    alpha: float = 0.05
    outcome_library: str = "ols"
    treatment_library: str = "lasso,mean"
    aggregate_only: bool = False
    verbose: bool = False
    dgp: Dict[str, float] = field(default_factory=dict)

    _CONVERTERS = {
        "folds": int,
        "draws": int,
        "seed": int,
        "penalty": float,
        "rand_prob": _to_optional_float,
        "trim": _to_bool,
        "replicates": int,
        "estimators": _to_tuple,
        "datasets": _to_int_tuple,
        "threads": int,
        "alpha": float,
        "aggregate_only": _to_bool,
        "verbose": _to_bool,
    }

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command '{self.command}'")
        if self.folds < 2:
            raise ConfigError("--folds must be at least 2")
        if self.draws < 1:
            raise ConfigError("--draws must be positive")
        if self.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if self.replicates < 1:
            raise ConfigError("--replicates must be at least 1")
        if self.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        self.estimator_config()
        return self

    def estimator_config(self):
        return EstimatorConfig(
            mode=self.mode,
            outcome_library=parse_library(self.outcome_library),
            treatment_library=parse_library(self.treatment_library),
            selection_library=parse_library(self.treatment_library),
            nco_library=parse_library(self.outcome_library),
            rand_prob=self.rand_prob,
            penalty=self.penalty,
            n_jobs=self.threads,
        )

    def to_dict(self):
        out = {}
        for f in fields(self):
            if f.name in ("verbose", "command"):
                continue
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    def apply(self, values, source):
        """Return a copy with string or typed values applied; unknown keys raise ConfigError."""
        known = {f.name for f in fields(self)}
        updates = {}
        dgp = dict(self.dgp)
        for key, value in values.items():
            if value is None:
                continue
            key = key.strip().lower().replace("-", "_")
            if key.startswith("dgp_"):
                try:
                    dgp[key[4:]] = float(value)
                except ValueError as e:
                    raise ConfigError(f"{source}: {key} must be numeric") from e
                continue
            if key not in known or key == "dgp":
                raise ConfigError(f"{source}: unknown setting '{key}'")
            convert = self._CONVERTERS.get(key)
            try:
                updates[key] = convert(value) if convert else value
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{source}: bad value for {key}: {value!r}") from e
        return replace(self, dgp=dgp, **updates)


def environment_values(environ=None):
    """Collect FUSION_SELECT_* settings from the environment."""
    environ = os.environ if environ is None else environ
    return {
        key[len(ENV_PREFIX):].lower(): value
        for key, value in environ.items()
        if key.startswith(ENV_PREFIX)
    }


def load_run_config(cli_values, config_file=None, environ=None, use_dotenv=True):
    """
    Resolve a RunConfig from every configuration source.

    Args:
        cli_values (dict): Explicit command-line values; None means not given
        config_file (str, optional): Flat key=value file
        environ (mapping, optional): Environment, defaults to os.environ
        use_dotenv (bool): Load a .env file into the environment first

    Returns:
        RunConfig: Validated configuration
    """
    if use_dotenv and environ is None:
        load_dotenv()
    config = RunConfig()
    if config_file:
        if not os.path.exists(config_file):
            raise ConfigError(f"config file '{config_file}' does not exist")
        config = config.apply(dotenv_values(config_file), config_file)
    config = config.apply(environment_values(environ), "environment")
    config = config.apply(cli_values, "command line")
    return config.validate()
