"""NumPy reference implementation of the hot numerical kernels.

Two kernels dominate fitting time, both evaluated for every observed-zero
record and every mixture component at every trial parameter value:

* ``log_h_lognormal`` -- the false-zero integral of the log-normal family,
  written on the u = log(m) scale where the 1/m singularity vanishes::

      h = integral_{-inf}^{log bound} exp( -(resid0 - slope*e^u)^2 / (2*resid_sd^2)
                                           - rate^2 * e^u
                                           - (u - mu)^2 / (2*sigma^2) ) du

  evaluated by adaptive Gauss-Kronrod 15 panels on the effective support
  [mu - 10*sigma, min(log bound, mu + 10*sigma)] (the Gaussian factor is
  below 2e-22 outside): a uniform starting grid, then repeated bisection of
  the panel with the largest error estimate until the total error passes
  the tolerance.  Each panel is evaluated at its own peak scale and panels
  combine in log space, so the result is returned as log h without
  underflow.

* ``log_false_zero_sum_poisson`` / ``log_false_zero_sum_negbin`` -- the
  count-family analogue, a log-sum-exp over the masked values m = 1..bound.

The compiled Cython backend implements the same node scheme and the same
convergence rules; results agree to floating-point reordering.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, logsumexp

# Gauss-Kronrod 15 on [-1, 1]: Kronrod nodes/weights plus the embedded
# Gauss-7 weights (zero at Kronrod-only nodes).  QUADPACK dqk15 constants.
GK_NODES = np.array([
    -0.991455371120813, -0.949107912342759, -0.864864423359769,
    -0.741531185599394, -0.586087235467691, -0.405845151377397,
    -0.207784955007898, 0.0,
    0.207784955007898, 0.405845151377397, 0.586087235467691,
    0.741531185599394, 0.864864423359769, 0.949107912342759,
    0.991455371120813,
])
GK_WEIGHTS = np.array([
    0.022935322010529, 0.063092092629979, 0.104790010322250,
    0.140653259715525, 0.169004726639267, 0.190350578064785,
    0.204432940075298, 0.209482141084728, 0.204432940075298,
    0.190350578064785, 0.169004726639267, 0.140653259715525,
    0.104790010322250, 0.063092092629979, 0.022935322010529,
])
GAUSS_WEIGHTS = np.array([
    0.0, 0.129484966168870, 0.0, 0.279705391489277, 0.0,
    0.381830050505119, 0.0, 0.417959183673469, 0.0,
    0.381830050505119, 0.0, 0.279705391489277, 0.0,
    0.129484966168870, 0.0,
])
GK_DIFF = GK_WEIGHTS - GAUSS_WEIGHTS

TAIL_SDS = 10.0  # Gaussian factor < 2e-22 beyond mu +/- 10 sigma
BASE_PANELS = 16
MAX_PANELS = 200


def _panel_batch(a, b, resid0, slope, rate2, inv_two_dsq, mu, inv_two_ssq):
    """GK15 on panels [a, b] (last axis broadcastable).

    Returns per-panel (scale, kron, err): the scaled Kronrod integral
    ``kron * exp(scale)`` and scaled |Kronrod - Gauss| error estimate.
    """
    center = 0.5 * (a + b)
    half = 0.5 * (b - a)
    u = center[..., None] + half[..., None] * GK_NODES
    # exp(u) factored as exp(center)*exp(half*node): one exp per node
    with np.errstate(over="ignore", under="ignore"):
        em = np.exp(center)[..., None] * np.exp(half[..., None] * GK_NODES)
    resid = resid0[..., None] - slope[..., None] * em
    du = u - mu[..., None]
    g = -resid * resid * inv_two_dsq - rate2 * em - du * du * inv_two_ssq
    scale = g.max(axis=-1)
    with np.errstate(invalid="ignore", under="ignore"):
        vals = np.exp(g - scale[..., None])
    vals = np.where(np.isfinite(scale[..., None]), vals, 0.0)
    kron = half * (vals @ GK_WEIGHTS)
    err = half * np.abs(vals @ GK_DIFF)
    return scale, kron, err


def _combine(scales, krons, errs):
    """Log-space combination of per-panel scaled integrals."""
    s = scales.max()
    if not np.isfinite(s):
        return -np.inf, 0.0, 0.0
    with np.errstate(under="ignore"):
        w = np.exp(scales - s)
    total = float(np.sum(krons * w))
    err = float(np.sum(errs * w))
    return s, total, err


def log_h_lognormal(resid0, slope, mu, sigma, resid_sd, rate, log_bound, tol,
                    base_panels=BASE_PANELS, max_panels=MAX_PANELS):
    """Log of the false-zero integral for each (record, component) pair.

    Parameters
    ----------
    resid0, slope : (n,) arrays
        Outcome residual at m=0 and its slope in m, so the outcome residual
        at mediator value m is ``resid0 - slope*m``.
    mu : (n, K) array
        Component log-means at each record's exposure/confounders.
    sigma, resid_sd, rate : floats
        Shared log-scale SD, outcome residual SD, false-zero rate.
    log_bound : float
        log of the masking threshold.
    tol : float
        Absolute tolerance on the peak-scaled integral.  Because the
        integrand never exceeds 1, this also bounds the absolute error of h.

    Returns
    -------
    log_h : (n, K) array
    err : (n, K) array
        Error estimate on the scale of h (already multiplied by the peak).
    converged : (n, K) bool array
    """
    resid0 = np.asarray(resid0, dtype=float)
    slope = np.asarray(slope, dtype=float)
    mu = np.asarray(mu, dtype=float)
    n, k = mu.shape

    lo = mu - TAIL_SDS * sigma
    hi = np.minimum(log_bound, mu + TAIL_SDS * sigma)

    log_h = np.full((n, k), -np.inf)
    err_out = np.zeros((n, k))
    converged = np.ones((n, k), dtype=bool)

    idx = np.flatnonzero((hi > lo).ravel())
    if idx.size == 0:
        return log_h, err_out, converged

    rate2 = rate * rate
    inv_two_dsq = 0.5 / (resid_sd * resid_sd)
    inv_two_ssq = 0.5 / (sigma * sigma)
    flat_r0 = np.broadcast_to(resid0[:, None], (n, k)).ravel()[idx]
    flat_slope = np.broadcast_to(slope[:, None], (n, k)).ravel()[idx]
    flat_mu = mu.ravel()[idx]
    flat_lo = lo.ravel()[idx]
    flat_hi = hi.ravel()[idx]

    # uniform starting grid, vectorized over all integrals at once
    frac = np.arange(base_panels + 1) / base_panels
    edges = flat_lo[:, None] + (flat_hi - flat_lo)[:, None] * frac
    scales, krons, errs = _panel_batch(
        edges[:, :-1], edges[:, 1:],
        flat_r0[:, None], flat_slope[:, None], rate2, inv_two_dsq,
        flat_mu[:, None], inv_two_ssq)

    # most integrals finish on the starting grid; settle them vectorized
    s0 = scales.max(axis=1)
    finite0 = np.isfinite(s0)
    with np.errstate(invalid="ignore", under="ignore"):
        w0 = np.exp(scales - s0[:, None])
    w0[~finite0] = 0.0
    total0 = np.sum(krons * w0, axis=1)
    errt0 = np.sum(errs * w0, axis=1)
    easy = ~finite0 | (errt0 <= tol)
    done_cells = idx[easy]
    pos_mask = easy & finite0 & (total0 > 0.0)
    with np.errstate(divide="ignore"):
        log_h.ravel()[idx[pos_mask]] = s0[pos_mask] + np.log(total0[pos_mask])
    with np.errstate(under="ignore"):
        err_vals = np.where(finite0, errt0 * np.exp(np.minimum(s0, 700.0)), 0.0)
    err_out.ravel()[done_cells] = err_vals[easy]

    for a in np.flatnonzero(~easy):
        lefts = list(edges[a, :-1])
        rights = list(edges[a, 1:])
        sc = list(scales[a])
        kr = list(krons[a])
        er = list(errs[a])
        r0_a, slope_a, mu_a = flat_r0[a], flat_slope[a], flat_mu[a]
        while True:
            s, total, err = _combine(np.array(sc), np.array(kr), np.array(er))
            if not np.isfinite(s):
                ok = True
                break
            ok = err <= tol
            if ok or len(sc) >= max_panels:
                break
            # bisect the panel with the largest scaled error contribution
            with np.errstate(under="ignore"):
                contrib = np.array(er) * np.exp(np.array(sc) - s)
            j = int(np.argmax(contrib))
            mid = 0.5 * (lefts[j] + rights[j])
            if not (lefts[j] < mid < rights[j]):
                break  # panel at floating point resolution
            new_s, new_k, new_e = _panel_batch(
                np.array([lefts[j], mid]), np.array([mid, rights[j]]),
                np.array([r0_a, r0_a]), np.array([slope_a, slope_a]),
                rate2, inv_two_dsq, np.array([mu_a, mu_a]), inv_two_ssq)
            # panel j becomes its left half; the right half goes to the end
            old_right = rights[j]
            rights[j] = mid
            sc[j], kr[j], er[j] = new_s[0], new_k[0], new_e[0]
            lefts.append(mid)
            rights.append(old_right)
            sc.append(new_s[1])
            kr.append(new_k[1])
            er.append(new_e[1])
        cell = idx[a]
        if np.isfinite(s) and total > 0.0:
            log_h.ravel()[cell] = s + math.log(total)
        with np.errstate(under="ignore"):
            err_out.ravel()[cell] = err * math.exp(min(s, 700.0)) if np.isfinite(s) else 0.0
        converged.ravel()[cell] = bool(ok)

    return log_h, err_out, converged


def log_false_zero_sum_poisson(resid0, slope, loc, resid_sd, rate, bound):
    """Log-sum over masked values m=1..bound of the Poisson false-zero terms.

    Each term is exp(m*loc - lgamma(m+1) - (resid0-slope*m)^2/(2*resid_sd^2)
    - rate^2*m); ``loc`` holds the component log-means, shape (n, K).
    """
    m = np.arange(1.0, np.floor(bound) + 1.0)
    resid = np.asarray(resid0)[:, None, None] - np.asarray(slope)[:, None, None] * m
    lh = (m * np.asarray(loc)[:, :, None] - gammaln(m + 1.0)
          - 0.5 * (resid / resid_sd) ** 2 - rate * rate * m)
    return logsumexp(lh, axis=-1)


def log_false_zero_sum_negbin(resid0, slope, loc, dispersion, resid_sd, rate, bound):
    """Negative binomial analogue of :func:`log_false_zero_sum_poisson`."""
    m = np.arange(1.0, np.floor(bound) + 1.0)
    loc = np.asarray(loc)
    log_r = np.log(dispersion)
    log_frac = loc - np.logaddexp(log_r, loc)  # log(mu / (r + mu)), stable
    resid = np.asarray(resid0)[:, None, None] - np.asarray(slope)[:, None, None] * m
    lh = (gammaln(dispersion + m) - gammaln(dispersion) - gammaln(m + 1.0)
          + m * log_frac[:, :, None]
          - 0.5 * (resid / resid_sd) ** 2 - rate * rate * m)
    return logsumexp(lh, axis=-1)
