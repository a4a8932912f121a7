"""
Observation storage, experiment views, positivity trimming, fold assignment
and outcome scaling.
"""

from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from fusion_select.exceptions import DataError

REQUIRED_COLUMNS = ("S", "A", "Y")
OPTIONAL_COLUMNS = ("NCO", "DELTA")


class Observation(NamedTuple):
    """One row O = (W, S, A, Y, NCO, DELTA)."""

    w: np.ndarray
    s: int
    a: int
    y: Optional[float]
    nco: Optional[float]
    delta: Optional[int]


def _frozen(values, dtype):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DataTable:
    """
    Immutable column store of observations.

    S=0 marks the randomized trial, S=1..K the candidate external control
    datasets. Y is NaN exactly where DELTA is 0.

    Args:
        W (np.ndarray): Covariate matrix, shape (n, p)
        S (np.ndarray): Experiment source per row
        A (np.ndarray): Binary treatment per row
        Y (np.ndarray): Outcome per row, NaN when missing
        covariate_names (tuple): Names of the W columns
        nco (np.ndarray, optional): Negative control outcome
        delta (np.ndarray, optional): Outcome observed indicator
        discrete (tuple, optional): Per covariate flag, True for discrete levels
        warnings (tuple, optional): Non-fatal notes accumulated by operations
    """

    W: np.ndarray
    S: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    covariate_names: Tuple[str, ...]
    nco: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None
    discrete: Tuple[bool, ...] = ()
    warnings: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        if W.ndim == 1:
            W = W.reshape(-1, 1) if W.size else W.reshape(len(self.S), 0)
        n = W.shape[0]
        names = tuple(self.covariate_names)
        if len(names) != W.shape[1]:
            raise DataError(f"{W.shape[1]} covariate columns but {len(names)} names")
        discrete = tuple(self.discrete) if self.discrete else (False,) * len(names)
        if len(discrete) != len(names):
            raise DataError("discrete flags must match covariate columns")

        for col, values in (("S", self.S), ("A", self.A), ("Y", self.Y)):
            if len(values) != n:
                raise DataError(f"column {col} has {len(values)} rows, expected {n}", column=col)

        S_raw = np.asarray(self.S, dtype=float)
        bad = np.flatnonzero(~np.isfinite(S_raw) | (S_raw < 0) | (S_raw != np.round(S_raw)))
        if bad.size:
            raise DataError(f"row {bad[0]}: S must be a non-negative integer", row=int(bad[0]), column="S")
        S = S_raw.astype(int)
        if not np.any(S == 0):
            raise DataError("no trial rows (S=0) present", column="S")

        A_raw = np.asarray(self.A, dtype=float)
        bad = np.flatnonzero(~np.isin(A_raw, (0.0, 1.0)))
        if bad.size:
            raise DataError(f"row {bad[0]}: A must be 0 or 1, got {A_raw[bad[0]]!r}", row=int(bad[0]), column="A")
        A = A_raw.astype(int)
        bad = np.flatnonzero((S > 0) & (A == 1))
        if bad.size:
            raise DataError(f"row {bad[0]}: treated row outside the trial (S={S[bad[0]]})", row=int(bad[0]), column="A")

        Y = np.asarray(self.Y, dtype=float)
        delta = None
        if self.delta is not None:
            d_raw = np.asarray(self.delta, dtype=float)
            bad = np.flatnonzero(~np.isin(d_raw, (0.0, 1.0)))
            if bad.size:
                raise DataError(f"row {bad[0]}: DELTA must be 0 or 1", row=int(bad[0]), column="DELTA")
            delta = d_raw.astype(int)
            bad = np.flatnonzero((delta == 1) & ~np.isfinite(Y))
            if bad.size:
                raise DataError(f"row {bad[0]}: Y missing but DELTA=1", row=int(bad[0]), column="Y")
            bad = np.flatnonzero((delta == 0) & np.isfinite(Y))
            if bad.size:
                raise DataError(f"row {bad[0]}: Y present but DELTA=0", row=int(bad[0]), column="Y")
        else:
            bad = np.flatnonzero(~np.isfinite(Y))
            if bad.size:
                raise DataError(f"row {bad[0]}: Y missing and no DELTA column", row=int(bad[0]), column="Y")

        bad_w = np.argwhere(~np.isfinite(W))
        if bad_w.size:
            r, c = bad_w[0]
            raise DataError(f"row {r}: covariate {names[c]} is not finite", row=int(r), column=names[c])

        nco = None
        if self.nco is not None:
            nco = np.asarray(self.nco, dtype=float)
            if len(nco) != n:
                raise DataError("column NCO has the wrong length", column="NCO")

        object.__setattr__(self, "W", _frozen(W, float))
        object.__setattr__(self, "S", _frozen(S, int))
        object.__setattr__(self, "A", _frozen(A, int))
        object.__setattr__(self, "Y", _frozen(Y, float))
        object.__setattr__(self, "nco", None if nco is None else _frozen(nco, float))
        object.__setattr__(self, "delta", None if delta is None else _frozen(delta, int))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "discrete", discrete)
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def n(self):
        return self.W.shape[0]

    @property
    def has_nco(self):
        return self.nco is not None

    @property
    def has_missingness(self):
        return self.delta is not None

    @property
    def observed(self):
        """Outcome observed indicator (all ones without missingness)."""
        if self.delta is None:
            return np.ones(self.n, dtype=int)
        return self.delta

    @property
    def external_sources(self):
        """Sorted external dataset labels s > 0 present in the table."""
        return tuple(int(s) for s in np.unique(self.S) if s > 0)

    def experiment_mask(self, s):
        """Rows of experiment S in {0, s}; s=0 is the trial alone."""
        if s == 0:
            return self.S == 0
        return (self.S == 0) | (self.S == s)

    def rows(self) -> Iterator[Observation]:
        for i in range(self.n):
            y = float(self.Y[i]) if np.isfinite(self.Y[i]) else None
            nco = None
            if self.nco is not None and np.isfinite(self.nco[i]):
                nco = float(self.nco[i])
            delta = None if self.delta is None else int(self.delta[i])
            yield Observation(self.W[i], int(self.S[i]), int(self.A[i]), y, nco, delta)

    def subset(self, mask):
        """Return a new table holding the rows selected by a boolean mask."""
        mask = np.asarray(mask, dtype=bool)
        return replace(
            self,
            W=self.W[mask],
            S=self.S[mask],
            A=self.A[mask],
            Y=self.Y[mask],
            nco=None if self.nco is None else self.nco[mask],
            delta=None if self.delta is None else self.delta[mask],
        )

    def with_warning(self, message):
        return replace(self, warnings=self.warnings + (message,))

    def to_frame(self):
        """Return the table as a DataFrame using the CSV column layout."""
        frame = pd.DataFrame(np.asarray(self.W), columns=list(self.covariate_names))
        for name, is_discrete in zip(self.covariate_names, self.discrete):
            if is_discrete:
                frame[name] = frame[name].astype(int)
        frame["S"] = self.S
        frame["A"] = self.A
        frame["Y"] = self.Y
        if self.nco is not None:
            frame["NCO"] = self.nco
        if self.delta is not None:
            frame["DELTA"] = self.delta
        return frame


def from_frame(frame):
    """
    Build a DataTable from a DataFrame with columns S, A, Y and optional
    NCO, DELTA. Every remaining column is a covariate.

    Args:
        frame (pd.DataFrame): Input data

    Returns:
        DataTable: Validated table
    """
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"missing required column(s): {', '.join(missing)}", column=missing[0])

    covariates = [c for c in frame.columns if c not in REQUIRED_COLUMNS + OPTIONAL_COLUMNS]
    discrete = []
    for name in covariates:
        col = frame[name]
        if not (pd.api.types.is_numeric_dtype(col) or pd.api.types.is_bool_dtype(col)):
            bad = int(np.flatnonzero(pd.to_numeric(col, errors="coerce").isna().to_numpy())[0])
            raise DataError(f"row {bad}: covariate {name} is not numeric", row=bad, column=name)
        discrete.append(bool(pd.api.types.is_integer_dtype(col) or pd.api.types.is_bool_dtype(col)))

    for name in ("S", "A", "DELTA"):
        if name in frame.columns:
            numeric = pd.to_numeric(frame[name], errors="coerce")
            bad = np.flatnonzero(numeric.isna().to_numpy())
            if bad.size:
                raise DataError(f"row {bad[0]}: {name} is empty or not numeric", row=int(bad[0]), column=name)
    y = pd.to_numeric(frame["Y"], errors="coerce")
    bad = np.flatnonzero(y.isna().to_numpy() & frame["Y"].notna().to_numpy())
    if bad.size:
        raise DataError(f"row {bad[0]}: Y is not numeric", row=int(bad[0]), column="Y")

    W = frame[covariates].to_numpy(dtype=float) if covariates else np.zeros((len(frame), 0))
    return DataTable(
        W=W,
        S=frame["S"].to_numpy(dtype=float),
        A=frame["A"].to_numpy(dtype=float),
        Y=y.to_numpy(dtype=float),
        covariate_names=tuple(str(c) for c in covariates),
        nco=frame["NCO"].to_numpy(dtype=float) if "NCO" in frame.columns else None,
        delta=frame["DELTA"].to_numpy(dtype=float) if "DELTA" in frame.columns else None,
        discrete=tuple(discrete),
    )


def read_csv(path):
    """
    Load observations from a CSV file with a header row.

    Args:
        path (str): Path to the CSV file

    Returns:
        DataTable: Validated table
    """
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"cannot read {path}: {e}") from e
    return from_frame(frame)


def trim_to_rct_support(data):
    """
    Drop external rows whose covariates fall outside the trial's support.

    Continuous covariates must lie within the trial [min, max]; discrete
    covariates must take a level observed in the trial. Trial rows are never
    dropped.

    Args:
        data (DataTable): Input table

    Returns:
        DataTable: Trimmed table, with a warning for each emptied external dataset
    """
    rct = data.S == 0
    keep = np.ones(data.n, dtype=bool)
    for j, is_discrete in enumerate(data.discrete):
        column = data.W[:, j]
        reference = column[rct]
        if is_discrete:
            inside = np.isin(column, np.unique(reference))
        else:
            inside = (column >= reference.min()) & (column <= reference.max())
        keep &= inside
    keep |= rct

    dropped = int((~keep).sum())
    if dropped == 0:
        return data
    logger.info("Trimmed {} external rows outside trial covariate support", dropped)
    trimmed = data.subset(keep)
    for s in data.external_sources:
        if not np.any(trimmed.S == s):
            message = f"all rows of external dataset S={s} fall outside trial support; experiment {{0,{s}}} is trial only"
            logger.warning(message)
            trimmed = trimmed.with_warning(message)
    return trimmed


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """
    Fold labels 1..V per row. Fold v's estimation set is the rows labelled v,
    its experiment-selection set all other rows.
    """

    labels: np.ndarray
    V: int

    def estimation(self, v):
        return self.labels == v

    def selection(self, v):
        return self.labels != v

    def folds(self):
        return range(1, self.V + 1)


def _canonical_order(data, idx):
    keys = [data.W[idx, j] for j in range(data.W.shape[1])][::-1]
    if data.nco is not None:
        keys.append(data.nco[idx])
    keys.append(data.Y[idx])
    keys.append(data.A[idx])
    return idx[np.lexsort(keys)]


def make_folds(data, V, seed):
    """
    Assign V folds stratified on S.

    Rows of each stratum are put in a canonical order, shuffled by a generator
    keyed on (seed, stratum) and dealt round-robin, so fold sizes within a
    stratum differ by at most one and a stratum's labels do not depend on the
    other strata.

    Args:
        data (DataTable): Input table
        V (int): Number of folds, at least 2
        seed (int): Non-negative seed

    Returns:
        FoldPlan: Fold labels
    """
    if V < 2:
        raise DataError(f"V must be at least 2, got {V}")
    labels = np.zeros(data.n, dtype=int)
    for s in np.unique(data.S):
        idx = np.flatnonzero(data.S == s)
        if idx.size < V:
            raise DataError(f"stratum S={s} has {idx.size} rows, fewer than V={V} folds", column="S")
        ordered = _canonical_order(data, idx)
        rng = np.random.default_rng([int(seed), int(s)])
        shuffled = ordered[rng.permutation(idx.size)]
        labels[shuffled] = np.arange(idx.size) % V + 1
    labels.setflags(write=False)
    return FoldPlan(labels=labels, V=int(V))


@dataclass(frozen=True)
class OutcomeScale:
    """Min-max map of an outcome onto [0, 1]."""

    y_min: float
    y_max: float

    @property
    def width(self):
        return self.y_max - self.y_min

    def apply(self, y):
        return (np.asarray(y, dtype=float) - self.y_min) / self.width

    def invert(self, y_scaled):
        return np.asarray(y_scaled, dtype=float) * self.width + self.y_min

    def invert_difference(self, d):
        """Map a difference of scaled values back to the outcome scale."""
        return np.asarray(d, dtype=float) * self.width


def fit_scale(y_values):
    """
    Fit a min-max outcome scale on the observed values.

    Args:
        y_values (array-like): Outcome values; NaN entries are ignored

    Returns:
        OutcomeScale: Scale with y_min < y_max. Binary 0/1 outcomes give the identity.
    """
    y = np.asarray(y_values, dtype=float)
    y = y[np.isfinite(y)]
    if y.size < 2 or y.min() == y.max():
        raise DataError("outcome has fewer than two distinct values; cannot scale")
    return OutcomeScale(float(y.min()), float(y.max()))
