"""Closed-form mediation and direct effects with delta-method inference.

For exposure moving from x1 to x2 at confounder values z_ref, with
E(M_x) the mediator mean and delta_x the total zero probability:

    NIE1 = (y_mediator + y_exposure_mediator*x2) * (E(M_x2) - E(M_x1))
    NIE2 = (y_nonzero + y_exposure_nonzero*x2) * (delta_x1 - delta_x2)
    NDE  = (x2 - x1) * (y_exposure + y_exposure_nonzero*(1 - delta_x1)
                        + y_exposure_mediator*E(M_x1))
    NIE  = NIE1 + NIE2,  TE = NIE + NDE  (exact by construction)

NIE1 captures the pathway through the mediator's numerical change, NIE2 the
pathway through its zero/non-zero status.  Standard errors propagate the
free-coordinate covariance through a central-difference gradient of each
effect; confidence intervals and p-values use the normal reference.
"""

from __future__ import annotations

import math

import numpy as np

from .exceptions import FitError
from .families import delta_prob, mediator_mean
from .model import (
    EffectEstimate,
    EffectTable,
    FittedModel,
    MediatorFamily,
    ParameterSet,
)

__all__ = ["nie1", "nie2", "nde", "effect_table"]

EFFECT_GRAD_STEP = 1e-5
Z_95 = 1.96


def nie1(theta: ParameterSet, family: MediatorFamily, x1: float, x2: float,
         z_ref=None) -> float:
    """Mediation effect through the numerical change of the mediator."""
    slope = theta.y_mediator + theta.y_exposure_mediator * x2
    return slope * (mediator_mean(family, theta, x2, z_ref)
                    - mediator_mean(family, theta, x1, z_ref))


def nie2(theta: ParameterSet, family: MediatorFamily, x1: float, x2: float,
         z_ref=None) -> float:
    """Mediation effect through the zero/non-zero status change."""
    slope = theta.y_nonzero + theta.y_exposure_nonzero * x2
    return slope * (delta_prob(family, theta, x1, z_ref)
                    - delta_prob(family, theta, x2, z_ref))


def nde(theta: ParameterSet, family: MediatorFamily, x1: float, x2: float,
        z_ref=None) -> float:
    """Natural direct effect holding the mediator at its x1 distribution."""
    one_minus_delta = 1.0 - delta_prob(family, theta, x1, z_ref)
    return (x2 - x1) * (theta.y_exposure
                        + theta.y_exposure_nonzero * one_minus_delta
                        + theta.y_exposure_mediator * mediator_mean(family, theta, x1, z_ref))


def _resolve_z_ref(theta: ParameterSet, z_ref) -> np.ndarray:
    if z_ref is None:
        if theta.n_confounders:
            raise FitError(
                "z_ref is required when the model has confounders; "
                "pass e.g. dataset.confounder_means()"
            )
        return np.zeros(0)
    z_ref = np.asarray(z_ref, dtype=float)
    if z_ref.shape != (theta.n_confounders,):
        raise FitError(f"z_ref must have shape ({theta.n_confounders},), got {z_ref.shape}")
    return z_ref


def effect_table(fitted: FittedModel, x1: float, x2: float, z_ref=None) -> EffectTable:
    """Point estimates, SEs, 95% CIs and p-values for the decomposition.

    SEs come from the delta method over the fit's free coordinates.  With a
    singular or unavailable covariance the estimates are still returned and
    the inference columns are NaN.
    """
    if not fitted.converged:
        raise FitError("effect_table requires a converged fit")
    theta = fitted.theta_hat
    family = fitted.family
    z = _resolve_z_ref(theta, z_ref)
    space = fitted.parameter_space
    v0 = space.pack(theta)

    def base_effects(vec: np.ndarray) -> np.ndarray:
        th = space.unpack(vec)
        return np.array([
            nie1(th, family, x1, x2, z),
            nie2(th, family, x1, x2, z),
            nde(th, family, x1, x2, z),
        ])

    est = base_effects(v0)
    grads = np.empty((3, v0.size))
    for j in range(v0.size):
        h = EFFECT_GRAD_STEP * max(1.0, abs(v0[j]))
        vp = v0.copy()
        vm = v0.copy()
        vp[j] += h
        vm[j] -= h
        grads[:, j] = (base_effects(vp) - base_effects(vm)) / (2.0 * h)

    # NIE and TE are sums, so their gradients are sums as well
    full_est = np.array([est[0], est[1], est[0] + est[1], est[2],
                         est[0] + est[1] + est[2]])
    full_grads = np.vstack([grads[0], grads[1], grads[0] + grads[1], grads[2],
                            grads[0] + grads[1] + grads[2]])

    vcov = fitted.vcov
    if np.all(np.isfinite(vcov)):
        variances = np.einsum("ij,jk,ik->i", full_grads, vcov, full_grads)
        ses = np.sqrt(np.maximum(variances, 0.0))
    else:
        ses = np.full(5, np.nan)

    rows = []
    for e, s in zip(full_est, ses):
        if np.isfinite(s) and s > 0:
            zstat = e / s
            p = math.erfc(abs(zstat) / math.sqrt(2.0))
            rows.append(EffectEstimate(float(e), float(s),
                                       float(e - Z_95 * s), float(e + Z_95 * s), float(p)))
        else:
            rows.append(EffectEstimate(float(e), float("nan"),
                                       float("nan"), float("nan"), float("nan")))
    return EffectTable(x1=float(x1), x2=float(x2), z_ref=z,
                       nie1=rows[0], nie2=rows[1], nie=rows[2],
                       nde=rows[3], te=rows[4])
