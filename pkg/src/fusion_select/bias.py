"""
Bias decomposition TMLEs on an experiment-selection set: pooled control
mean, trial control mean, their difference and the NCO ATE.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from loguru import logger
from scipy.special import logit

from fusion_select.exceptions import ConfigError, EstimationError
from fusion_select.tmle import EicVector, Fluctuation, fluctuate_ate, shift_logit, tmle_ate

GS_FLOOR_WARNING_SHARE = 0.10


@dataclass(frozen=True, eq=False)
class ControlMean:
    """TMLE of a control mean with its influence curve."""

    estimate: float
    eic: EicVector
    fluctuation: Fluctuation


@dataclass(frozen=True, eq=False)
class BiasEstimates:
    """
    Bias estimates of experiment {0, s} on one fold's selection set.

    psi_hash = psi0_trial - psi0_pooled; phi is the NCO ATE when computed.
    """

    experiment: int
    fold: Optional[int]
    psi0_pooled: float
    psi0_trial: float
    psi_hash: float
    eic_hash: EicVector
    phi: Optional[float] = None
    eic_phi: Optional[EicVector] = None
    warnings: Tuple[str, ...] = ()

    def bias_term(self, kind):
        """Bias entering the selector: b2v, +nco or nco-only."""
        if kind == "b2v":
            return self.psi_hash
        if self.phi is None:
            raise ConfigError(f"selector {kind} needs the NCO ATE")
        if kind == "+nco":
            return self.psi_hash + self.phi
        if kind == "nco-only":
            return self.phi
        raise ConfigError(f"unknown selector '{kind}'")

    def bias_eic(self, kind):
        if kind == "b2v":
            return self.eic_hash
        if self.eic_phi is None:
            raise ConfigError(f"selector {kind} needs the NCO influence curve")
        if kind == "+nco":
            return self.eic_hash + self.eic_phi
        if kind == "nco-only":
            return self.eic_phi
        raise ConfigError(f"unknown selector '{kind}'")

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "fold": self.fold,
            "psi0_pooled": self.psi0_pooled,
            "psi0_trial": self.psi0_trial,
            "psi_hash": self.psi_hash,
            "phi": self.phi,
        }


def _control_mean(data, rows, q0, h_eval, eligible, mode, scale, name):
    """
    Target mean_rows Q(0, W). h_eval is the clever covariate at the target
    arm for every row; only eligible observed rows enter the fluctuation.
    """
    observed = data.observed[rows] == 1
    y = scale.apply(data.Y[rows])
    fit_rows = observed & eligible
    h = np.where(fit_rows, h_eval, 0.0)
    if not fit_rows.any():
        raise EstimationError(f"{name}: no observed control rows")
    fluctuation = fluctuate_ate(logit(q0[fit_rows]), h[fit_rows], y[fit_rows], mode, scale)
    q_star = shift_logit(q0, h_eval, fluctuation)
    estimate_scaled = float(np.mean(q_star))
    residual = np.where(fit_rows, np.nan_to_num(y) - q_star, 0.0)
    phi = scale.width * (h * residual + q_star - estimate_scaled)
    estimate = float(scale.invert(estimate_scaled))
    return ControlMean(estimate, EicVector.from_contributions(name, rows, phi, estimate), fluctuation)


def tmle_pooled_control_mean(data, selection, fits, mode):
    """
    TMLE of the pooled control mean E[Q^{0,s}(0, W)] over experiment rows of
    the selection set.

    Args:
        data (DataTable): Observations
        selection (np.ndarray): Selection-set mask
        fits (NuisanceFits): Models trained on the same selection set
        mode (str): Targeting mode

    Returns:
        ControlMean: Estimate and EIC
    """
    rows = selection & data.experiment_mask(fits.experiment)
    W = data.W[rows]
    a = data.A[rows]
    g0 = 1.0 - fits.g1(W)
    gd0 = fits.g_delta_at(np.zeros(a.size))
    h_eval = 1.0 / (g0 * gd0)
    return _control_mean(data, rows, fits.q(W, 0), h_eval, a == 0, mode, fits.scale, "psi0_pooled")


def tmle_trial_control_mean(data, selection, fits, mode):
    """
    TMLE of the trial control mean E[Q^s(S=0, A=0, W)] over experiment rows
    of the selection set.

    Returns:
        tuple: (ControlMean, warnings)
    """
    rows = selection & data.experiment_mask(fits.experiment)
    W = data.W[rows]
    a = data.A[rows]
    trial_controls = (a == 0) & (data.S[rows] == 0)
    g0 = 1.0 - fits.g1(W)
    gs0 = fits.g_s0(W)
    gd0 = fits.g_delta_at(np.zeros(a.size))
    h_eval = 1.0 / (gs0 * g0 * gd0)

    warnings = ()
    if fits.experiment > 0 and fits.g_s.kind != "constant":
        share = float(np.mean(fits.g_s0_raw(W) <= fits.floor))
        if share > GS_FLOOR_WARNING_SHARE:
            message = (f"fold {fits.fold}, experiment {fits.experiment}: selection mechanism at the "
                       f"probability floor for {share:.0%} of rows (near positivity violation)")
            logger.warning(message)
            warnings = (message,)
    result = _control_mean(data, rows, fits.q_study(W, 0, 0), h_eval, trial_controls,
                           mode, fits.scale, "psi0_trial")
    return result, warnings


def tmle_nco_ate(data, selection, fits, mode):
    """
    TMLE of the ATE of A on the negative control outcome over experiment rows
    of the selection set. Rows with a missing NCO are excluded.

    Returns:
        tuple: (AteTmle, warnings)
    """
    if not data.has_nco:
        raise ConfigError("NCO column required for the NCO ATE")
    rows = selection & data.experiment_mask(fits.experiment)
    warnings = ()
    missing = int((rows & ~np.isfinite(data.nco)).sum())
    if missing:
        message = f"fold {fits.fold}, experiment {fits.experiment}: {missing} rows without NCO excluded"
        logger.warning(message)
        warnings = (message,)
    return tmle_ate(data, fits, rows, mode, outcome="NCO", name="phi"), warnings


def estimate_bias(data, selection, fits, mode, use_nco=False):
    """
    Bias estimates of experiment {0, s} on a selection set.

    For s=0 the trial and pooled populations coincide, so psi_hash is 0 and
    its influence curve is identically 0.

    Args:
        data (DataTable): Observations
        selection (np.ndarray): Selection-set mask
        fits (NuisanceFits): Models trained on the selection set
        mode (str): Targeting mode
        use_nco (bool): Also estimate the NCO ATE

    Returns:
        BiasEstimates: Estimates and influence curves
    """
    s = fits.experiment
    if use_nco and not data.has_nco:
        raise ConfigError("NCO-based selectors need an NCO column")
    pooled = tmle_pooled_control_mean(data, selection, fits, mode)
    warnings = ()
    if s == 0:
        trial_estimate = pooled.estimate
        psi_hash = 0.0
        eic_hash = EicVector.zeros("psi_hash", data.n)
    else:
        trial, warnings = tmle_trial_control_mean(data, selection, fits, mode)
        trial_estimate = trial.estimate
        psi_hash = trial.estimate - pooled.estimate
        eic_hash = trial.eic - pooled.eic
        eic_hash = EicVector("psi_hash", eic_hash.values, eic_hash.support, psi_hash)

    phi, eic_phi = None, None
    if use_nco:
        nco, nco_warnings = tmle_nco_ate(data, selection, fits, mode)
        phi, eic_phi = nco.estimate, nco.eic
        warnings += nco_warnings

    return BiasEstimates(
        experiment=s,
        fold=fits.fold,
        psi0_pooled=pooled.estimate,
        psi0_trial=trial_estimate,
        psi_hash=psi_hash,
        eic_hash=eic_hash,
        phi=phi,
        eic_phi=eic_phi,
        warnings=warnings,
    )
