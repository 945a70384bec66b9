"""Group-wise log-likelihood contributions and the observed-data likelihood.

Records split into two groups: observed-positive mediators (group 1) and
observed zeros (group 2).  Conditional on latent class k >= 1 a group-1
record contributes its outcome density, the probability of *not* being
masked, and the class-k mediator density/mass (zero-truncated per component
for count families).  A group-2 record is either a true zero (class 0,
outcome density only) or a masked positive whose unknown true value is
marginalized over (0, bound] -- an integral for the log-normal family, a
finite sum for count families.

Prior class probabilities are ``delta`` for class 0 and ``(1-delta)*w_k``
otherwise, with ``delta`` the family's total zero probability.  Posterior
class weights and the observed-data log-likelihood both come from the same
row-wise log-sum-exp over (log prior + contribution) matrices, so the two
are always mutually consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import gammaln, log_expit, logsumexp

from . import _kernels
from .exceptions import DataError, FitError, QuadratureError
from .model import Dataset, MediatorFamily, ModelConfig, ObservedRecord, ParameterSet

__all__ = [
    "RecordGroup",
    "RecordLogLiks",
    "PackedData",
    "LikelihoodEngine",
    "loglik_pos",
    "loglik_true_zero",
    "h_integral",
    "loglik_false_zero",
    "observed_loglik",
    "q_function",
    "record_logliks",
]

LOG_2PI = math.log(2.0 * math.pi)


def _log1mexp(x: np.ndarray) -> np.ndarray:
    """log(1 - exp(-x)) for x > 0, stable at both ends."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        small = np.log(-np.expm1(-np.minimum(x, 0.6931471805599453)))
        large = np.log1p(-np.exp(-np.maximum(x, 0.6931471805599453)))
    return np.where(x < 0.6931471805599453, small, large)


class RecordGroup(Enum):
    POSITIVE = "positive"
    ZERO_OBSERVED = "zero_observed"


@dataclass(frozen=True)
class RecordLogLiks:
    """Per-record class-conditional log-likelihoods and prior class weights.

    ``ell1`` has K entries (positive records only), ``ell2`` has K+1 entries
    indexed by class 0..K (observed-zero records only).  ``psi_weights`` are
    the prior class probabilities (delta, (1-delta)*w_1, ...), always length
    K+1 and summing to one.
    """

    group: RecordGroup
    psi_weights: np.ndarray
    ell1: np.ndarray | None = None
    ell2: np.ndarray | None = None


@dataclass(frozen=True)
class PackedData:
    """Column-wise view of a dataset split into the two likelihood groups."""

    y_pos: np.ndarray
    m_pos: np.ndarray
    x_pos: np.ndarray
    z_pos: np.ndarray
    y_zero: np.ndarray
    x_zero: np.ndarray
    z_zero: np.ndarray
    pos_index: np.ndarray
    zero_index: np.ndarray
    log_m_pos: np.ndarray
    lgamma_m_pos: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "PackedData":
        y, m, x, z = dataset.arrays()
        pos = m > 0
        zero = ~pos
        m_pos = m[pos]
        return cls(
            y_pos=y[pos], m_pos=m_pos, x_pos=x[pos], z_pos=z[pos],
            y_zero=y[zero], x_zero=x[zero], z_zero=z[zero],
            pos_index=np.flatnonzero(pos), zero_index=np.flatnonzero(zero),
            log_m_pos=np.log(m_pos), lgamma_m_pos=gammaln(m_pos + 1.0),
        )

    @property
    def n_pos(self) -> int:
        return self.y_pos.shape[0]

    @property
    def n_zero(self) -> int:
        return self.y_zero.shape[0]


class LikelihoodEngine:
    """Evaluates likelihood matrices for one (family, dataset, config) triple.

    All heavy work happens in :meth:`matrices`; the posterior weights, the
    observed log-likelihood and the EM objective are cheap reductions of its
    output.  Instances are reused across the many evaluations of a fit.
    """

    def __init__(self, family: MediatorFamily, data: PackedData, config: ModelConfig):
        if family.is_count:
            config.validate_for_family(family)
        self.family = family
        self.data = data
        self.bound = config.false_zero_bound
        self.quad_tol = config.quadrature_abs_tol
        self._fz_pos_mask = data.m_pos <= self.bound
        self.quad_converged = True  # sticky flag for diagnostics

    # -- linear predictor helpers ---------------------------------------

    def _locations(self, theta: ParameterSet, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        loc = theta.comp_intercepts + theta.comp_slopes * x[:, None]
        if theta.n_confounders:
            loc = loc + (z @ theta.comp_confounders)[:, None]
        return loc

    def _zero_logit(self, theta: ParameterSet, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        lp = theta.zero_intercept + theta.zero_exposure * x
        if theta.n_confounders:
            lp = lp + z @ theta.zero_confounders
        return lp

    def _outcome_resid_pos(self, theta: ParameterSet) -> np.ndarray:
        d = self.data
        resid = (d.y_pos - theta.y_intercept - theta.y_mediator * d.m_pos
                 - theta.y_nonzero
                 - (theta.y_exposure + theta.y_exposure_nonzero) * d.x_pos
                 - theta.y_exposure_mediator * d.x_pos * d.m_pos)
        if theta.n_confounders:
            resid = resid - d.z_pos @ theta.y_confounders
        return resid

    def _false_zero_resid0_slope(self, theta: ParameterSet):
        d = self.data
        resid0 = (d.y_zero - theta.y_intercept - theta.y_nonzero
                  - (theta.y_exposure + theta.y_exposure_nonzero) * d.x_zero)
        if theta.n_confounders:
            resid0 = resid0 - d.z_zero @ theta.y_confounders
        slope = theta.y_mediator + theta.y_exposure_mediator * d.x_zero
        return resid0, slope

    # -- matrix builders -------------------------------------------------

    def pos_loglik_matrix(self, theta: ParameterSet) -> np.ndarray:
        """Class-conditional contributions of group-1 records, shape (n1, K)."""
        with np.errstate(over="ignore", under="ignore"):
            return self._pos_loglik_matrix(theta)

    def _pos_loglik_matrix(self, theta: ParameterSet) -> np.ndarray:
        d = self.data
        if d.n_pos == 0:
            return np.zeros((0, theta.k))
        resid = self._outcome_resid_pos(theta)
        sd = theta.resid_sd
        outcome = -math.log(sd) - 0.5 * (resid / sd) ** 2 - 0.5 * LOG_2PI
        fz = np.zeros(d.n_pos)
        masked = self._fz_pos_mask
        if masked.any():
            rate2 = theta.false_zero_rate ** 2
            fz[masked] = _log1mexp(rate2 * d.m_pos[masked])
        loc = self._locations(theta, d.x_pos, d.z_pos)
        if self.family is MediatorFamily.ZILONM:
            s = theta.log_scale_sd
            comp = (-d.log_m_pos[:, None] - math.log(s) - 0.5 * LOG_2PI
                    - 0.5 * ((d.log_m_pos[:, None] - loc) / s) ** 2)
        elif self.family is MediatorFamily.ZIPM:
            loc = np.maximum(loc, -700.0)  # keep exp(loc) > 0: avoids inf-inf
            lam = np.exp(loc)
            # zero-truncated Poisson: m*log(lam) - log(e^lam - 1) - log(m!)
            comp = (d.m_pos[:, None] * loc - (lam + _log1mexp(lam))
                    - d.lgamma_m_pos[:, None])
        else:
            loc = np.maximum(loc, -700.0)
            r = theta.dispersion
            log_r = math.log(r)
            log_denom = np.logaddexp(log_r, loc)
            t = r * (log_denom - log_r)  # -log of the component zero mass
            comp = (gammaln(r + d.m_pos[:, None]) - gammaln(r) - d.lgamma_m_pos[:, None]
                    + d.m_pos[:, None] * (loc - log_denom) + r * (log_r - log_denom)
                    - _log1mexp(t))
        return (outcome + fz)[:, None] + comp

    def zero_loglik_matrix(self, theta: ParameterSet) -> np.ndarray:
        """Class-conditional contributions of group-2 records, shape (n2, K+1).

        Column 0 is the true-zero contribution; columns 1..K marginalize a
        masked positive value over (0, bound].
        """
        with np.errstate(over="ignore", under="ignore"):
            return self._zero_loglik_matrix(theta)

    def _zero_loglik_matrix(self, theta: ParameterSet) -> np.ndarray:
        d = self.data
        out = np.empty((d.n_zero, theta.k + 1))
        if d.n_zero == 0:
            return out.reshape(0, theta.k + 1)
        sd = theta.resid_sd
        resid_true = d.y_zero - theta.y_intercept - theta.y_exposure * d.x_zero
        if theta.n_confounders:
            resid_true = resid_true - d.z_zero @ theta.y_confounders
        out[:, 0] = -math.log(sd) - 0.5 * (resid_true / sd) ** 2 - 0.5 * LOG_2PI

        resid0, slope = self._false_zero_resid0_slope(theta)
        loc = self._locations(theta, d.x_zero, d.z_zero)
        rate = theta.false_zero_rate
        if self.family is MediatorFamily.ZILONM:
            s = theta.log_scale_sd
            log_h, _err, conv = _kernels.log_h_lognormal(
                resid0, slope, loc, s, sd, rate, math.log(self.bound), self.quad_tol)
            if not conv.all():
                self.quad_converged = False
            out[:, 1:] = -math.log(sd) - math.log(s) + log_h - LOG_2PI
        elif self.family is MediatorFamily.ZIPM:
            loc = np.maximum(loc, -700.0)
            lam = np.exp(loc)
            log_norm = lam + _log1mexp(lam)  # log(e^lam - 1)
            log_sum = _kernels.log_false_zero_sum_poisson(
                resid0, slope, loc, sd, rate, self.bound)
            out[:, 1:] = -math.log(sd) - 0.5 * LOG_2PI - log_norm + log_sum
        else:
            loc = np.maximum(loc, -700.0)
            r = theta.dispersion
            log_r = math.log(r)
            t = r * (np.logaddexp(log_r, loc) - log_r)
            log_norm = t + _log1mexp(t)  # log((1+mu/r)^r - 1)
            log_sum = _kernels.log_false_zero_sum_negbin(
                resid0, slope, loc, r, sd, rate, self.bound)
            out[:, 1:] = -math.log(sd) - 0.5 * LOG_2PI - log_norm + log_sum
        return out

    def log_class_priors(self, theta: ParameterSet, x: np.ndarray,
                         z: np.ndarray) -> np.ndarray:
        """log of (delta, (1-delta)*w_1, ..., (1-delta)*w_K) per record."""
        with np.errstate(over="ignore", under="ignore"):
            return self._log_class_priors(theta, x, z)

    def _log_class_priors(self, theta: ParameterSet, x: np.ndarray,
                          z: np.ndarray) -> np.ndarray:
        lp = self._zero_logit(theta, x, z)
        n = x.shape[0]
        out = np.empty((n, theta.k + 1))
        log_w = np.log(theta.mix_weights)
        if self.family is MediatorFamily.ZILONM:
            out[:, 0] = log_expit(lp)
            out[:, 1:] = log_expit(-lp)[:, None] + log_w
            return out
        loc = self._locations(theta, x, z)
        if self.family is MediatorFamily.ZIPM:
            log_zero_k = -np.exp(loc)
        else:
            log_r = math.log(theta.dispersion)
            log_zero_k = theta.dispersion * (log_r - np.logaddexp(log_r, loc))
        log_zero_mix = logsumexp(log_w + log_zero_k, axis=1)
        log_dstar = log_expit(lp)
        log_1m_dstar = log_expit(-lp)
        out[:, 0] = np.logaddexp(log_dstar, log_1m_dstar + log_zero_mix)
        with np.errstate(divide="ignore"):
            log_1m_zero_mix = np.log1p(-np.exp(np.minimum(log_zero_mix, 0.0)))
        out[:, 1:] = (log_1m_dstar + log_1m_zero_mix)[:, None] + log_w
        return out

    # -- reductions -------------------------------------------------------

    def score_matrices(self, theta: ParameterSet):
        """(log prior + contribution) matrices for both groups.

        Row-wise log-sum-exp gives the observed log-likelihood; row-wise
        softmax gives the posterior class weights.
        """
        d = self.data
        pos = self.pos_loglik_matrix(theta)
        if d.n_pos:
            pos = pos + self.log_class_priors(theta, d.x_pos, d.z_pos)[:, 1:]
        zero = self.zero_loglik_matrix(theta)
        if d.n_zero:
            zero = zero + self.log_class_priors(theta, d.x_zero, d.z_zero)
        return pos, zero

    def observed_loglik(self, theta: ParameterSet) -> float:
        pos, zero = self.score_matrices(theta)
        total = 0.0
        for mat in (pos, zero):
            if mat.shape[0]:
                total += float(np.sum(logsumexp(mat, axis=1)))
        return total

    def loglik_and_posteriors(self, theta: ParameterSet):
        """One pass returning (loglik, tau1, tau2); the E-step plus bookkeeping."""
        pos, zero = self.score_matrices(theta)
        total = 0.0
        taus = []
        for mat, group, index in ((pos, "positive", self.data.pos_index),
                                  (zero, "zero", self.data.zero_index)):
            if mat.shape[0] == 0:
                taus.append(np.zeros_like(mat))
                continue
            norms = logsumexp(mat, axis=1)
            bad = ~np.isfinite(norms)
            if bad.any():
                raise FitError(
                    f"all classes impossible for {group} record(s) "
                    f"{index[bad][:5].tolist()}"
                )
            total += float(np.sum(norms))
            taus.append(np.exp(mat - norms[:, None]))
        return total, taus[0], taus[1]

    def q_value(self, theta: ParameterSet, tau1: np.ndarray, tau2: np.ndarray) -> float:
        """EM objective: posterior-weighted complete-data log-likelihood."""
        pos, zero = self.score_matrices(theta)
        total = 0.0
        for tau, mat in ((tau1, pos), (tau2, zero)):
            if mat.shape[0] == 0:
                continue
            with np.errstate(invalid="ignore"):
                prod = tau * mat
            total += float(np.sum(np.where(tau > 0.0, prod, 0.0)))
        return total


# -- record-level operations (thin wrappers over the engine) --------------


def _singleton_engine(record: ObservedRecord, family: MediatorFamily,
                      config: ModelConfig) -> LikelihoodEngine:
    n_conf = record.confounders.shape[0]
    y = np.array([record.outcome])
    m = np.array([record.mediator])
    x = np.array([record.exposure])
    z = record.confounders.reshape(1, n_conf)
    pos = record.mediator > 0
    data = PackedData(
        y_pos=y if pos else y[:0], m_pos=m if pos else m[:0],
        x_pos=x if pos else x[:0], z_pos=z if pos else z[:0],
        y_zero=y[:0] if pos else y, x_zero=x[:0] if pos else x,
        z_zero=z[:0] if pos else z,
        pos_index=np.array([0] if pos else [], dtype=int),
        zero_index=np.array([] if pos else [0], dtype=int),
        log_m_pos=np.log(m) if pos else m[:0],
        lgamma_m_pos=gammaln(m + 1.0) if pos else m[:0],
    )
    return LikelihoodEngine(family, data, config)


def loglik_pos(record: ObservedRecord, k: int, theta: ParameterSet,
               family: MediatorFamily, config: ModelConfig) -> float:
    """Class-k log-likelihood contribution of an observed-positive record."""
    if record.mediator <= 0:
        raise DataError("loglik_pos requires a positive observed mediator")
    if not 1 <= k <= theta.k:
        raise DataError(f"component index {k} out of range 1..{theta.k}")
    eng = _singleton_engine(record, family, config)
    return float(eng.pos_loglik_matrix(theta)[0, k - 1])


def loglik_true_zero(record: ObservedRecord, theta: ParameterSet) -> float:
    """Class-0 (true zero) log-likelihood contribution; family-independent."""
    if record.mediator != 0:
        raise DataError("loglik_true_zero requires an observed zero")
    resid = (record.outcome - theta.y_intercept - theta.y_exposure * record.exposure
             - float(record.confounders @ theta.y_confounders))
    sd = theta.resid_sd
    return float(-math.log(sd) - 0.5 * (resid / sd) ** 2 - 0.5 * LOG_2PI)


def h_integral(record: ObservedRecord, k: int, theta: ParameterSet,
               config: ModelConfig) -> float:
    """False-zero marginalization integral of the log-normal family.

    Value on the original (density) scale; raises QuadratureError when the
    requested tolerance cannot be certified.
    """
    if record.mediator != 0:
        raise DataError("h_integral requires an observed zero")
    if not 1 <= k <= theta.k:
        raise DataError(f"component index {k} out of range 1..{theta.k}")
    eng = _singleton_engine(record, MediatorFamily.ZILONM, config)
    resid0, slope = eng._false_zero_resid0_slope(theta)
    loc = eng._locations(theta, eng.data.x_zero, eng.data.z_zero)
    log_h, err, conv = _kernels.log_h_lognormal(
        resid0, slope, loc, theta.log_scale_sd, theta.resid_sd,
        theta.false_zero_rate, math.log(config.false_zero_bound),
        config.quadrature_abs_tol)
    if not conv.all():
        raise QuadratureError(
            f"false-zero integral did not reach tolerance "
            f"{config.quadrature_abs_tol} (error estimate {float(err[0, k - 1]):.3e})"
        )
    return float(np.exp(log_h[0, k - 1]))


def loglik_false_zero(record: ObservedRecord, k: int, theta: ParameterSet,
                      family: MediatorFamily, config: ModelConfig) -> float:
    """Class-k contribution of an observed zero (a masked positive value)."""
    if record.mediator != 0:
        raise DataError("loglik_false_zero requires an observed zero")
    if not 1 <= k <= theta.k:
        raise DataError(f"component index {k} out of range 1..{theta.k}")
    eng = _singleton_engine(record, family, config)
    return float(eng.zero_loglik_matrix(theta)[0, k])


def record_logliks(record: ObservedRecord, theta: ParameterSet,
                   family: MediatorFamily, config: ModelConfig) -> RecordLogLiks:
    """Bundle of class-conditional log-likelihoods and prior class weights."""
    eng = _singleton_engine(record, family, config)
    x = np.array([record.exposure])
    z = record.confounders.reshape(1, -1)
    psi = np.exp(eng.log_class_priors(theta, x, z)[0])
    if record.mediator > 0:
        return RecordLogLiks(group=RecordGroup.POSITIVE, psi_weights=psi,
                             ell1=eng.pos_loglik_matrix(theta)[0])
    return RecordLogLiks(group=RecordGroup.ZERO_OBSERVED, psi_weights=psi,
                         ell2=eng.zero_loglik_matrix(theta)[0])


def observed_loglik(dataset: Dataset, theta: ParameterSet,
                    family: MediatorFamily, config: ModelConfig) -> float:
    """Observed-data log-likelihood (marginal over latent classes)."""
    eng = LikelihoodEngine(family, PackedData.from_dataset(dataset), config)
    return eng.observed_loglik(theta)


def q_function(dataset: Dataset, theta: ParameterSet, tau1: np.ndarray,
               tau2: np.ndarray, family: MediatorFamily, config: ModelConfig) -> float:
    """EM objective at ``theta`` given posterior weights from the E-step."""
    eng = LikelihoodEngine(family, PackedData.from_dataset(dataset), config)
    if tau1.shape != (eng.data.n_pos, theta.k) or tau2.shape != (eng.data.n_zero, theta.k + 1):
        raise DataError(
            f"posterior weight shapes {tau1.shape}/{tau2.shape} do not match "
            f"data ({eng.data.n_pos}, {theta.k})/({eng.data.n_zero}, {theta.k + 1})"
        )
    return eng.q_value(theta, tau1, tau2)
