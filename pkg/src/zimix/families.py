"""Zero-inflated mixture families for the mediator.

Three families share one structure: a point mass at zero plus a K-component
mixture for positive values.  For the log-normal family the zero mass is
modelled directly on the logit scale; for the count families the logit
models an excess-zero probability on top of the zeros the count mixture
itself produces, so the total zero probability is

    delta = delta_star + (1 - delta_star) * sum_k w_k * P_k(0).

All masses are evaluated in log space; densities of positive values are the
mixture renormalized to the positive support (for count families the
zero-truncated mixture).

The observation mechanism masks a positive true value m <= bound as an
observed zero with probability exp(-rate^2 * m); true zeros are always
observed as zeros and values above the bound are never masked.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, gammaln, log_expit, logsumexp

from .exceptions import ConfigError, DataError
from .model import MediatorFamily, ParameterSet

__all__ = [
    "component_locations",
    "zero_logit",
    "delta_prob",
    "positive_mass",
    "log_positive_mass",
    "mediator_mean",
    "sample_true",
    "sample_true_batch",
    "false_zero_prob",
    "observe",
    "observe_batch",
]

LOG_2PI = math.log(2.0 * math.pi)


def component_locations(theta: ParameterSet, x, z=None) -> np.ndarray:
    """Per-component linear predictors at (x, z) on the family link scale.

    Log-mean of each log-normal component, or log of each Poisson/negative
    binomial component mean.  Broadcasts over array-valued ``x`` to shape
    ``(..., K)``.
    """
    x = np.asarray(x, dtype=float)
    zterm = 0.0 if z is None or theta.n_confounders == 0 else float(np.dot(np.asarray(z), theta.comp_confounders))
    return theta.comp_intercepts + theta.comp_slopes * x[..., None] + zterm


def zero_logit(theta: ParameterSet, x, z=None):
    """Linear predictor of the zero model (logit scale)."""
    x = np.asarray(x, dtype=float)
    zterm = 0.0 if z is None or theta.n_confounders == 0 else float(np.dot(np.asarray(z), theta.zero_confounders))
    return theta.zero_intercept + theta.zero_exposure * x + zterm


def _log_component_zero_mass(family: MediatorFamily, theta: ParameterSet,
                             loc: np.ndarray) -> np.ndarray:
    """log P_k(0) of each untruncated count component; -inf for log-normal."""
    if family is MediatorFamily.ZIPM:
        return -np.exp(loc)
    if family is MediatorFamily.ZINBM:
        log_r = math.log(theta.dispersion)
        return theta.dispersion * (log_r - np.logaddexp(log_r, loc))
    return np.full(np.shape(loc), -np.inf)


def delta_prob(family: MediatorFamily, theta: ParameterSet, x: float, z=None) -> float:
    """Total probability that the true mediator equals zero at (x, z)."""
    lp = zero_logit(theta, x, z)
    if family is MediatorFamily.ZILONM:
        return float(expit(lp))
    loc = component_locations(theta, x, z)
    zero_mix = float(np.dot(theta.mix_weights, np.exp(_log_component_zero_mass(family, theta, loc))))
    dstar = float(expit(lp))
    return dstar + (1.0 - dstar) * zero_mix


def _log_component_mass(family: MediatorFamily, theta: ParameterSet, m,
                        loc: np.ndarray) -> np.ndarray:
    """Log density/mass of each untruncated component at positive m."""
    m = np.asarray(m, dtype=float)[..., None]
    if family is MediatorFamily.ZILONM:
        sd = theta.log_scale_sd
        logm = np.log(m)
        return -logm - math.log(sd) - 0.5 * LOG_2PI - 0.5 * ((logm - loc) / sd) ** 2
    if family is MediatorFamily.ZIPM:
        return m * loc - np.exp(loc) - gammaln(m + 1.0)
    r = theta.dispersion
    log_r = math.log(r)
    log_denom = np.logaddexp(log_r, loc)
    return (gammaln(r + m) - gammaln(r) - gammaln(m + 1.0)
            + m * (loc - log_denom) + r * (log_r - log_denom))


def log_positive_mass(family: MediatorFamily, theta: ParameterSet, m, x,
                      z=None) -> np.ndarray | float:
    """Log density (log-normal) or log mass (counts) of the positive part.

    This is the distribution of the mediator conditional on being positive:
    the mixture density for the log-normal family, and the zero-truncated
    mixture (truncated as a whole) for count families.
    """
    m_arr = np.asarray(m, dtype=float)
    if np.any(m_arr <= 0):
        raise DataError("positive_mass requires m > 0")
    if family.is_count and np.any(m_arr != np.floor(m_arr)):
        raise DataError(f"family {family.value} requires integer m")
    loc = component_locations(theta, x, z)
    logw = np.log(theta.mix_weights)
    log_mix = logsumexp(logw + _log_component_mass(family, theta, m_arr, loc), axis=-1)
    if family.is_count:
        zero_mix = np.dot(theta.mix_weights, np.exp(_log_component_zero_mass(family, theta, loc)))
        log_mix = log_mix - np.log1p(-zero_mix)
    return log_mix if np.ndim(m) else float(log_mix)


def positive_mass(family: MediatorFamily, theta: ParameterSet, m, x, z=None):
    """Density/mass of the positive part of the mediator; see log variant."""
    return np.exp(log_positive_mass(family, theta, m, x, z))


def mediator_mean(family: MediatorFamily, theta: ParameterSet, x: float, z=None) -> float:
    """E(M) at (x, z) under the family's generative law."""
    loc = component_locations(theta, x, z)
    w = theta.mix_weights
    if family is MediatorFamily.ZILONM:
        delta = delta_prob(family, theta, x, z)
        return float((1.0 - delta) * np.dot(w, np.exp(loc + 0.5 * theta.log_scale_sd ** 2)))
    dstar = float(expit(zero_logit(theta, x, z)))
    return float((1.0 - dstar) * np.dot(w, np.exp(loc)))


def _component_choice(weights: np.ndarray, u) -> np.ndarray:
    """Inverse-transform component draw from uniforms."""
    edges = np.cumsum(weights)
    edges[-1] = 1.0  # guard against round-off at the top edge
    return np.searchsorted(edges, u, side="right")


def sample_true(family: MediatorFamily, theta: ParameterSet, x: float, z,
                rng: np.random.Generator) -> float:
    """Draw one true mediator value at (x, z).

    Fixed draw order per call (zero indicator, component, value) with
    inverse-transform component choice, so a given generator state always
    produces the same value.  For count families the zero indicator only
    covers the excess zeros; a component draw may still produce zero.
    """
    lp = float(zero_logit(theta, x, z))
    if rng.uniform() < expit(lp):
        return 0.0
    k = int(_component_choice(theta.mix_weights, rng.uniform()))
    loc = float(component_locations(theta, x, z)[k])
    if family is MediatorFamily.ZILONM:
        return float(np.exp(loc + theta.log_scale_sd * rng.standard_normal()))
    if family is MediatorFamily.ZIPM:
        return float(rng.poisson(np.exp(loc)))
    mu = np.exp(loc)
    r = theta.dispersion
    return float(rng.negative_binomial(r, r / (r + mu)))


def sample_true_batch(family: MediatorFamily, theta: ParameterSet, x: np.ndarray,
                      z: np.ndarray | None, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`sample_true` over records.

    Draws column-wise (all zero indicators, all components, all values), so
    the stream layout differs from per-record calls; both are deterministic
    given the generator state.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    lp = theta.zero_intercept + theta.zero_exposure * x
    if z is not None and theta.n_confounders:
        lp = lp + z @ theta.zero_confounders
    is_zero = rng.uniform(size=n) < expit(lp)
    k = _component_choice(theta.mix_weights, rng.uniform(size=n))
    loc = theta.comp_intercepts + theta.comp_slopes * x[:, None]
    if z is not None and theta.n_confounders:
        loc = loc + (z @ theta.comp_confounders)[:, None]
    loc_k = np.take_along_axis(loc, k[:, None], axis=1)[:, 0]
    if family is MediatorFamily.ZILONM:
        values = np.exp(loc_k + theta.log_scale_sd * rng.standard_normal(n))
    elif family is MediatorFamily.ZIPM:
        values = rng.poisson(np.exp(loc_k)).astype(float)
    else:
        mu = np.exp(loc_k)
        r = theta.dispersion
        values = rng.negative_binomial(r, r / (r + mu)).astype(float)
    return np.where(is_zero, 0.0, values)


def false_zero_prob(m: float, rate: float, bound: float):
    """P(observed zero | true value m) under the masking mechanism."""
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise DataError("mediator values must be nonnegative")
    if not rate > 0 or not bound > 0:
        raise ConfigError("rate and bound must be positive")
    with np.errstate(under="ignore"):
        p = np.where(m <= bound, np.exp(-rate * rate * m), 0.0)
    return p if p.ndim else float(p)


def observe(m_true: float, rate: float, bound: float, rng: np.random.Generator) -> float:
    """Apply the masking mechanism to one true value; one uniform consumed."""
    p = false_zero_prob(m_true, rate, bound)
    return 0.0 if rng.uniform() < p else float(m_true)


def observe_batch(m_true: np.ndarray, rate: float, bound: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`observe`; one uniform per record."""
    m_true = np.asarray(m_true, dtype=float)
    p = false_zero_prob(m_true, rate, bound)
    return np.where(rng.uniform(size=m_true.shape) < p, 0.0, m_true)
