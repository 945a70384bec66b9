"""EM fitting engine.

The E-step reduces to row-wise softmaxes of the likelihood score matrices.
The M-step maximizes the EM objective numerically over the unconstrained
free coordinates with a BFGS ascent driven by central finite-difference
gradients; any ascent is accepted (generalized EM), which keeps the
observed log-likelihood monotone while allowing the fit loop to spend only
a few inner iterations per M-step.  Coordinates that enter only the class
priors (zero-model and mixing coordinates) get their derivatives from the
cheap prior term alone, skipping the expensive per-record contributions.

Standard errors come from the central-difference Hessian of the observed
log-likelihood at the maximum, inverted with a symmetric solve.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import FitError
from .likelihood import LikelihoodEngine, PackedData
from .model import (
    Dataset,
    FittedModel,
    MediatorFamily,
    ModelConfig,
    ParameterSet,
    ParameterSpace,
)

__all__ = [
    "PosteriorWeights",
    "EMTrace",
    "e_step",
    "m_step",
    "fit",
    "fit_detailed",
    "with_information",
    "observed_information",
    "initial_theta",
]

# M-step protocol constants
GRAD_TOL = 1e-7
GRAD_STEP = 1e-6
HESS_STEP = 1e-4
MAX_INNER_FULL = 200  # standalone m_step
MAX_INNER_FIT = 1  # partial ascent inside the fit loop (generalized EM)
ARMIJO_C1 = 1e-4
Q_GAIN_MARGIN = 1e-10  # relative; accept an M-step only above this gain

DEGENERATE_WEIGHT = 1e-4
DEGENERATE_SEPARATION = 1e-6
SCALE_BOUND = 1e6  # resid_sd / log_scale_sd flagged outside [1/B, B]


@dataclass(frozen=True)
class PosteriorWeights:
    """E-step posterior class probabilities.

    ``tau1`` has one row per observed-positive record (dataset order) and K
    columns; ``tau2`` one row per observed-zero record and K+1 columns with
    class 0 (true zero) first.  Rows sum to one.
    """

    tau1: np.ndarray
    tau2: np.ndarray


@dataclass(frozen=True)
class EMTrace:
    """Per-start EM diagnostics: likelihood path and parameter norms."""

    start_index: int
    loglik_path: np.ndarray
    theta_norm_path: np.ndarray
    converged: bool


def e_step(dataset: Dataset, theta: ParameterSet, family: MediatorFamily,
           config: ModelConfig) -> PosteriorWeights:
    """Posterior class-membership probabilities at ``theta``."""
    engine = LikelihoodEngine(family, PackedData.from_dataset(dataset), config)
    _, tau1, tau2 = engine.loglik_and_posteriors(theta)
    return PosteriorWeights(tau1=tau1, tau2=tau2)


# -- quasi-Newton machinery -------------------------------------------------


def _central_gradient(fun, v: np.ndarray, cheap_fun=None, cheap_mask=None) -> np.ndarray:
    """Central-difference gradient with per-coordinate relative steps.

    ``cheap_fun`` evaluates the part of the objective that the coordinates
    flagged in ``cheap_mask`` influence; they share the same difference
    quotient because the remaining part cancels.
    """
    g = np.empty(v.size)
    for j in range(v.size):
        h = GRAD_STEP * max(1.0, abs(v[j]))
        vp = v.copy()
        vm = v.copy()
        vp[j] += h
        vm[j] -= h
        f = cheap_fun if (cheap_mask is not None and cheap_mask[j]) else fun
        g[j] = (f(vp) - f(vm)) / (2.0 * h)
    return g


def _bfgs_ascent(fun, v0, *, gtol=GRAD_TOL, max_iter=MAX_INNER_FULL, warm_h=None,
                 f0=None, cheap_fun=None, cheap_mask=None):
    """BFGS maximization with Armijo backtracking.

    Stops at the gradient tolerance, the iteration cap, or when no ascent
    step can be found (the generalized-EM escape).  Returns the best point
    seen, its value, the inverse-Hessian approximation for warm starts, and
    the iteration count.
    """
    d = v0.size
    v = v0.copy()
    f = fun(v) if f0 is None else f0
    g = _central_gradient(fun, v, cheap_fun, cheap_mask)
    h_inv = np.eye(d) if warm_h is None else warm_h.copy()
    n_iter = 0
    while n_iter < max_iter and np.max(np.abs(g)) >= gtol:
        direction = h_inv @ g
        gd = float(g @ direction)
        if not np.isfinite(gd) or gd <= 1e-14 * (np.linalg.norm(g) * np.linalg.norm(direction) + 1e-300):
            h_inv = np.eye(d)
            direction = g.copy()
            gd = float(g @ g)
            if gd <= 0.0:
                break
        step = 1.0
        f_new = -np.inf
        accepted = False
        for _ in range(30):
            f_new = fun(v + step * direction)
            if np.isfinite(f_new) and f_new > f + ARMIJO_C1 * step * gd:
                accepted = True
                break
            step *= 0.5
        n_iter += 1
        if not accepted:
            break
        v_new = v + step * direction
        g_new = _central_gradient(fun, v_new, cheap_fun, cheap_mask)
        s = v_new - v
        y = g - g_new  # gradient change of the negated (minimized) objective
        sy = float(s @ y)
        if sy > 1e-12 * (np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
            rho = 1.0 / sy
            sh = np.outer(s, y) * rho
            h_inv = (np.eye(d) - sh) @ h_inv @ (np.eye(d) - sh.T) + rho * np.outer(s, s)
        v, f, g = v_new, f_new, g_new
    return v, f, g, h_inv, n_iter


class _QObjective:
    """Q as a function of the free vector, with the cheap prior-only split."""

    def __init__(self, engine: LikelihoodEngine, space: ParameterSpace,
                 tau1: np.ndarray, tau2: np.ndarray):
        self.engine = engine
        self.space = space
        self.tau1 = tau1
        self.tau2 = tau2
        d = engine.data
        self._tau1_rowsum = tau1.sum(axis=1) if d.n_pos else np.zeros(0)
        # coordinates entering only the class priors: zero model and mixing
        self.cheap_mask = np.array(
            [name.startswith(("zero_", "mix_alr")) for name in space.names])
        self._ell_cache = None

    def __call__(self, v: np.ndarray) -> float:
        theta = self.space.unpack(v)
        return self.engine.q_value(theta, self.tau1, self.tau2)

    def prior_part(self, theta: ParameterSet) -> float:
        eng, d = self.engine, self.engine.data
        total = 0.0
        if d.n_pos:
            lp = eng.log_class_priors(theta, d.x_pos, d.z_pos)
            total += float(np.sum(np.where(self.tau1 > 0.0, self.tau1 * lp[:, 1:], 0.0)))
        if d.n_zero:
            lp = eng.log_class_priors(theta, d.x_zero, d.z_zero)
            total += float(np.sum(np.where(self.tau2 > 0.0, self.tau2 * lp, 0.0)))
        return total

    def ell_part(self, theta: ParameterSet) -> float:
        eng, d = self.engine, self.engine.data
        total = 0.0
        if d.n_pos:
            mat = eng.pos_loglik_matrix(theta)
            total += float(np.sum(np.where(self.tau1 > 0.0, self.tau1 * mat, 0.0)))
        if d.n_zero:
            mat = eng.zero_loglik_matrix(theta)
            total += float(np.sum(np.where(self.tau2 > 0.0, self.tau2 * mat, 0.0)))
        return total

    def set_base(self, v: np.ndarray) -> None:
        self._ell_cache = self.ell_part(self.space.unpack(v))

    def prior_only(self, v: np.ndarray) -> float:
        # valid for coordinates that leave the contribution matrices alone
        return self._ell_cache + self.prior_part(self.space.unpack(v))


def m_step(dataset: Dataset, tau: PosteriorWeights, theta_init: ParameterSet,
           family: MediatorFamily, config: ModelConfig) -> ParameterSet:
    """One full M-step: numerical ascent of Q from ``theta_init``.

    Guarantees Q(result) >= Q(theta_init); runs the quasi-Newton ascent to
    the gradient tolerance or the inner iteration cap.  Component order is
    left untouched so the caller's posterior weights stay aligned.
    """
    engine = LikelihoodEngine(family, PackedData.from_dataset(dataset), config)
    space = ParameterSpace.for_config(family, theta_init.k, theta_init.n_confounders, config)
    obj = _QObjective(engine, space, tau.tau1, tau.tau2)
    v0 = space.pack(theta_init)
    obj.set_base(v0)
    f0 = obj(v0)
    v1, f1, _, _, _ = _bfgs_ascent(obj, v0, f0=f0, max_iter=MAX_INNER_FULL,
                                   cheap_fun=obj.prior_only, cheap_mask=obj.cheap_mask)
    if not (f1 >= f0):
        return theta_init
    return space.unpack(v1)


# -- initialization ---------------------------------------------------------


def _logistic_irls(X: np.ndarray, y: np.ndarray, max_iter=25, ridge=1e-6) -> np.ndarray:
    """Small ridge-stabilized Newton solver for logistic regression."""
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = np.clip(X @ beta, -30, 30)
        p = 1.0 / (1.0 + np.exp(-eta))
        w = np.maximum(p * (1.0 - p), 1e-6)
        grad = X.T @ (y - p) - ridge * beta
        hess = (X * w[:, None]).T @ X + ridge * np.eye(X.shape[1])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        beta = np.clip(beta + step, -8.0, 8.0)
        if np.max(np.abs(step)) < 1e-8:
            break
    return beta


def _split_1d(values_sorted: np.ndarray, k: int, n_iter: int = 30):
    """Deterministic 1-d k-means from quantile-midpoint centers.

    Returns cluster centers (ascending) and the assignment of each value.
    Far more robust than an equal-count quantile split when the low
    component is depleted among the observed positives by the masking
    mechanism.
    """
    centers = np.quantile(values_sorted, (np.arange(k) + 0.5) / k)
    assign = np.zeros(values_sorted.size, dtype=int)
    for _ in range(n_iter):
        bounds = 0.5 * (centers[1:] + centers[:-1])
        assign = np.searchsorted(bounds, values_sorted)
        new = np.array([
            values_sorted[assign == j].mean() if np.any(assign == j) else centers[j]
            for j in range(k)
        ])
        if np.array_equal(new, centers):
            break
        centers = new
    return centers, assign


def initial_theta(data: PackedData, family: MediatorFamily, k: int,
                  n_confounders: int, config: ModelConfig) -> ParameterSet:
    """Data-driven starting point.

    Outcome coefficients by least squares on the saturated design, the zero
    model by logistic regression of the zero indicator, component locations
    by a deterministic 1-d k-means split of the positive mediators, uniform
    mixing weights, unit false-zero rate.
    """
    y = np.concatenate([data.y_pos, data.y_zero])
    m = np.concatenate([data.m_pos, np.zeros(data.n_zero)])
    x = np.concatenate([data.x_pos, data.x_zero])
    z = np.vstack([data.z_pos, data.z_zero]) if n_confounders else np.zeros((y.size, 0))
    ind = (m > 0).astype(float)

    cols = [np.ones_like(y), m, ind, x]
    if config.exposure_nonzero_interaction:
        cols.append(x * ind)
    if config.exposure_mediator_interaction:
        cols.append(x * m)
    design = np.column_stack(cols + [z])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    pos = 4
    y_exp_nz = coef[pos] if config.exposure_nonzero_interaction else 0.0
    pos += config.exposure_nonzero_interaction
    y_exp_med = coef[pos] if config.exposure_mediator_interaction else 0.0
    pos += config.exposure_mediator_interaction
    resid = y - design @ coef
    resid_sd = max(float(np.std(resid)), 0.05)

    zero_design = np.column_stack([np.ones_like(y), x, z])
    zero_coef = _logistic_irls(zero_design, 1.0 - ind)

    v = data.log_m_pos if family is MediatorFamily.ZILONM else data.m_pos
    v_sorted = np.sort(v)
    if v_sorted.size >= k:
        _, assign = _split_1d(v_sorted, k)
        groups = [v_sorted[assign == j] for j in range(k)]
        groups = [g if g.size else v_sorted for g in groups]
    else:
        groups = [v_sorted] * k
    if family is MediatorFamily.ZILONM:
        intercepts = np.array([float(np.mean(g)) for g in groups])
        within = np.concatenate([g - np.mean(g) for g in groups])
        scale = max(float(np.std(within)), 0.05)
    else:
        intercepts = np.array([math.log(max(float(np.mean(g)), 0.1)) for g in groups])
        scale = None
    # keep distinct starting locations when the split produces ties
    for j in range(1, k):
        if intercepts[j] - intercepts[j - 1] < 1e-3:
            intercepts[j] = intercepts[j - 1] + 1e-3

    return ParameterSet(
        y_intercept=float(coef[0]), y_mediator=float(coef[1]),
        y_nonzero=float(coef[2]), y_exposure=float(coef[3]),
        y_exposure_nonzero=float(y_exp_nz), y_exposure_mediator=float(y_exp_med),
        y_confounders=coef[pos:pos + n_confounders], resid_sd=resid_sd,
        comp_intercepts=intercepts, comp_slopes=np.zeros(k),
        comp_confounders=zero_coef[2:] * 0.0 if n_confounders else np.zeros(0),
        zero_intercept=float(zero_coef[0]), zero_exposure=float(zero_coef[1]),
        zero_confounders=zero_coef[2:2 + n_confounders],
        mix_weights=np.full(k, 1.0 / k), false_zero_rate=1.0,
        log_scale_sd=scale if family is MediatorFamily.ZILONM else None,
        dispersion=1.0 if family is MediatorFamily.ZINBM else None,
    )


# -- fit driver -------------------------------------------------------------


def _degenerate_flags(theta: ParameterSet, quad_converged: bool) -> list[str]:
    flags = []
    if theta.k > 1:
        if float(theta.mix_weights.min()) < DEGENERATE_WEIGHT:
            flags.append("mix_weight_small")
        gaps = np.abs(np.diff(np.sort(theta.comp_intercepts)))
        if float(gaps.min()) < DEGENERATE_SEPARATION:
            flags.append("component_collision")
    if not (1.0 / SCALE_BOUND < theta.resid_sd < SCALE_BOUND):
        flags.append("resid_sd_bound")
    if theta.log_scale_sd is not None and not (1.0 / SCALE_BOUND < theta.log_scale_sd < SCALE_BOUND):
        flags.append("log_scale_sd_bound")
    if not quad_converged:
        flags.append("quadrature_tolerance")
    return flags


def _permutation_for_order(theta: ParameterSet) -> np.ndarray:
    return np.argsort(theta.comp_intercepts, kind="stable")


def _ascent_step(obj, v0, q0, g, h_inv):
    """One Armijo-backtracked quasi-Newton step; None when no ascent found."""
    direction = h_inv @ g
    gd = float(g @ direction)
    if not np.isfinite(gd) or gd <= 1e-14 * (np.linalg.norm(g) * np.linalg.norm(direction) + 1e-300):
        direction = g
        gd = float(g @ g)
        if gd <= 0.0:
            return None, q0
    step = 1.0
    for _ in range(30):
        v_new = v0 + step * direction
        q_new = obj(v_new)
        if np.isfinite(q_new) and q_new > q0 + ARMIJO_C1 * step * gd:
            return v_new, q_new
        step *= 0.5
    return None, q0


def _run_single_start(engine: LikelihoodEngine, space: ParameterSpace,
                      theta0: ParameterSet, config: ModelConfig):
    """Generalized EM: one quasi-Newton ascent step on Q per EM iteration.

    At each iteration's opening point, the posterior weights were just
    recomputed there, so the finite-difference Q-gradient equals the
    observed-log-likelihood gradient; BFGS curvature is accumulated from
    consecutive opening gradients without any extra evaluations.
    """
    theta = theta0
    loglik, tau1, tau2 = engine.loglik_and_posteriors(theta)
    v = space.pack(theta)
    path = [loglik]
    norms = [float(np.linalg.norm(v))]
    h_inv = np.eye(space.size)
    prev_v = prev_g = None
    unscaled = True
    converged = False
    n_iter = 0
    for n_iter in range(1, config.max_em_iter + 1):
        obj = _QObjective(engine, space, tau1, tau2)
        obj.set_base(v)
        q0 = obj(v)
        g = _central_gradient(obj, v, obj.prior_only, obj.cheap_mask)
        if prev_g is not None:
            s = v - prev_v
            y = prev_g - g  # gradient change of the negated objective
            sy = float(s @ y)
            if sy > 1e-12 * (np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
                if unscaled:
                    h_inv = (sy / float(y @ y)) * np.eye(space.size)
                    unscaled = False
                rho = 1.0 / sy
                sh = np.outer(s, y) * rho
                h_inv = (np.eye(space.size) - sh) @ h_inv @ (np.eye(space.size) - sh.T) \
                    + rho * np.outer(s, s)
        prev_v, prev_g = v, g

        v1, q1 = _ascent_step(obj, v, q0, g, h_inv)
        improved = v1 is not None and q1 > q0 + Q_GAIN_MARGIN * (1.0 + abs(q0))
        if improved:
            theta_new = space.unpack(v1)
            order = _permutation_for_order(theta_new)
            if not np.array_equal(order, np.arange(space.k)):
                theta_new = theta_new.canonicalized()
                v1 = space.pack(theta_new)
                h_inv = np.eye(space.size)  # curvature is stale after relabeling
                prev_v = prev_g = None
                unscaled = True
            loglik_new, tau1, tau2 = engine.loglik_and_posteriors(theta_new)
            v = v1
        else:
            theta_new, loglik_new = theta, loglik
        path.append(loglik_new)
        norms.append(float(np.linalg.norm(v)))
        done = abs(loglik_new - loglik) <= config.loglik_rel_tol * (1.0 + abs(loglik))
        theta, loglik = theta_new, loglik_new
        if done:
            converged = True
            break
    return theta, loglik, converged, n_iter, np.array(path), np.array(norms)


def fit_detailed(dataset: Dataset, family: MediatorFamily, k: int,
                 config: ModelConfig,
                 compute_information: bool = True) -> tuple[FittedModel, tuple[EMTrace, ...]]:
    """Multi-start EM fit returning the model and per-start traces.

    With ``compute_information=False`` the information matrix and covariance
    are left as NaN (model selection only needs the likelihood); attach them
    later with :func:`with_information`.
    """
    config.validate_for_family(family)
    if family.is_count and dataset.has_noninteger_mediators():
        raise FitError(f"family {family.value} requires integer mediator values")
    data = PackedData.from_dataset(dataset)
    engine = LikelihoodEngine(family, data, config)
    space = ParameterSpace.for_config(family, k, dataset.n_confounders, config)
    base = initial_theta(data, family, k, dataset.n_confounders, config)

    best = None
    traces = []
    for start in range(config.n_starts):
        theta0 = base
        if start > 0:
            rng = np.random.default_rng(np.random.SeedSequence((config.seed, start)))
            theta0 = space.unpack(space.pack(base) + rng.normal(0.0, 0.25, space.size))
        theta0 = theta0.canonicalized()
        try:
            result = _run_single_start(engine, space, theta0, config)
        except FitError:
            traces.append(EMTrace(start, np.array([]), np.array([]), False))
            continue
        theta, loglik, converged, n_iter, path, norms = result
        traces.append(EMTrace(start, path, norms, converged))
        if math.isfinite(loglik) and (best is None or loglik > best[1]):
            best = (theta, loglik, converged, n_iter)
    if best is None:
        raise FitError(f"no EM start produced a finite log-likelihood "
                       f"({family.value}, K={k})")
    theta, loglik, converged, n_iter = best
    theta = theta.canonicalized()

    # re-evaluate quadrature health at the final point only; trial points
    # visited by the line search do not matter
    engine.quad_converged = True
    if data.n_zero:
        engine.zero_loglik_matrix(theta)
    flags = _degenerate_flags(theta, engine.quad_converged)

    nan_mat = np.full((space.size, space.size), np.nan)
    n = dataset.n
    model = FittedModel(
        family=family, k=k, config=config.with_(family=family, k_range=(k, k)),
        theta_hat=theta, loglik=loglik, n_iter=n_iter, converged=converged,
        info_matrix=nan_mat, vcov=nan_mat, n_params=space.size,
        bic=-2.0 * loglik + space.size * math.log(n),
        aic=-2.0 * loglik + 2.0 * space.size,
        degenerate_flags=tuple(flags),
    )
    if compute_information:
        model = _attach_information(model, engine, space)
    return model, tuple(traces)


def _attach_information(model: FittedModel, engine: LikelihoodEngine,
                        space: ParameterSpace) -> FittedModel:
    flags = [f for f in model.degenerate_flags if f != "vcov_near_singular"]
    try:
        info = _information_from_engine(engine, space, model.theta_hat)
        vcov, singular = _invert_information(info)
    except FitError:
        info = np.full((space.size, space.size), np.nan)
        vcov = np.full((space.size, space.size), np.nan)
        singular = True
    if singular:
        flags.append("vcov_near_singular")
    return dataclasses.replace(model, info_matrix=info, vcov=vcov,
                               degenerate_flags=tuple(flags))


def with_information(model: FittedModel, dataset: Dataset) -> FittedModel:
    """Attach the observed information and covariance to a fit that skipped it."""
    engine = LikelihoodEngine(model.family, PackedData.from_dataset(dataset),
                              model.config)
    space = model.parameter_space
    return _attach_information(model, engine, space)


def fit(dataset: Dataset, family: MediatorFamily, k: int,
        config: ModelConfig, compute_information: bool = True) -> FittedModel:
    """Multi-start EM fit of one (family, K) candidate."""
    return fit_detailed(dataset, family, k, config, compute_information)[0]


# -- observed information ---------------------------------------------------


def _information_from_engine(engine: LikelihoodEngine, space: ParameterSpace,
                             theta: ParameterSet) -> np.ndarray:
    def f(v):
        return engine.observed_loglik(space.unpack(v))

    v0 = space.pack(theta)
    d = v0.size
    steps = HESS_STEP * np.maximum(1.0, np.abs(v0))
    f0 = f(v0)
    hess = np.empty((d, d))
    f_plus = np.empty(d)
    f_minus = np.empty(d)
    for i in range(d):
        vp = v0.copy()
        vm = v0.copy()
        vp[i] += steps[i]
        vm[i] -= steps[i]
        f_plus[i] = f(vp)
        f_minus[i] = f(vm)
        hess[i, i] = (f_plus[i] - 2.0 * f0 + f_minus[i]) / steps[i] ** 2
    for i in range(d):
        for j in range(i + 1, d):
            vpp = v0.copy()
            vpm = v0.copy()
            vmp = v0.copy()
            vmm = v0.copy()
            vpp[[i, j]] += [steps[i], steps[j]]
            vpm[i] += steps[i]
            vpm[j] -= steps[j]
            vmp[i] -= steps[i]
            vmp[j] += steps[j]
            vmm[[i, j]] -= [steps[i], steps[j]]
            hess[i, j] = hess[j, i] = (
                f(vpp) - f(vpm) - f(vmp) + f(vmm)
            ) / (4.0 * steps[i] * steps[j])
    if not np.all(np.isfinite(hess)):
        raise FitError("non-finite entries in the numerical Hessian")
    info = -0.5 * (hess + hess.T)
    return info


def _invert_information(info: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        cond = np.linalg.cond(info)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e10:
        return np.linalg.pinv(info, hermitian=True), True
    try:
        import scipy.linalg
        vcov = scipy.linalg.solve(info, np.eye(info.shape[0]), assume_a="sym")
    except Exception:
        return np.linalg.pinv(info, hermitian=True), True
    vcov = 0.5 * (vcov + vcov.T)
    return vcov, False


def observed_information(dataset: Dataset, theta_hat: ParameterSet,
                         family: MediatorFamily, config: ModelConfig) -> np.ndarray:
    """Negative Hessian of the observed log-likelihood over free coordinates."""
    engine = LikelihoodEngine(family, PackedData.from_dataset(dataset), config)
    space = ParameterSpace.for_config(family, theta_hat.k, theta_hat.n_confounders, config)
    return _information_from_engine(engine, space, theta_hat)
