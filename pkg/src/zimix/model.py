"""Core data model: records, configuration, parameters, fit results.

Everything here is an immutable value object.  Arrays stored on the
dataclasses are defensive copies with the writeable flag cleared, so
instances can be shared freely across threads and processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .exceptions import ConfigError, DataError

__all__ = [
    "MediatorFamily",
    "ObservedRecord",
    "Dataset",
    "ModelConfig",
    "ParameterSet",
    "ParameterSpace",
    "FittedModel",
    "EffectEstimate",
    "EffectTable",
    "free_vector",
    "theta_from_free",
]

COUNT_FAMILIES = frozenset({"zipm", "zinbm"})


class MediatorFamily(str, Enum):
    """Supported zero-inflated mixture families for the mediator."""

    ZILONM = "zilonm"  # zero-inflated log-normal mixture (continuous)
    ZIPM = "zipm"  # zero-inflated Poisson mixture (counts)
    ZINBM = "zinbm"  # zero-inflated negative binomial mixture (counts)

    @property
    def is_count(self) -> bool:
        return self.value in COUNT_FAMILIES


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


def _check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise DataError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class ObservedRecord:
    """One subject: outcome, observed mediator, exposure, confounders.

    The observed mediator is nonnegative; for count families it must be a
    nonnegative integer (enforced at model-validation time, not here).
    """

    outcome: float
    mediator: float
    exposure: float
    confounders: np.ndarray = field(default_factory=lambda: _frozen_array([]))

    def __post_init__(self):
        object.__setattr__(self, "confounders", _frozen_array(self.confounders))
        _check_finite("outcome", self.outcome)
        _check_finite("exposure", self.exposure)
        _check_finite("confounders", self.confounders)
        if not math.isfinite(self.mediator) or self.mediator < 0:
            raise DataError(f"mediator must be finite and >= 0, got {self.mediator}")


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of observed records with named confounders."""

    records: tuple[ObservedRecord, ...]
    confounder_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "confounder_names", tuple(self.confounder_names))
        if len(self.records) < 2:
            raise DataError("dataset needs at least 2 records")
        p = len(self.confounder_names)
        for i, rec in enumerate(self.records):
            if rec.confounders.shape != (p,):
                raise DataError(
                    f"record {i} has {rec.confounders.shape[0]} confounders, expected {p}"
                )
        if not any(r.mediator > 0 for r in self.records):
            raise DataError("dataset needs at least one record with a positive mediator")

    @classmethod
    def from_arrays(cls, outcome, mediator, exposure, confounders=None,
                    confounder_names=()) -> "Dataset":
        outcome = np.asarray(outcome, dtype=float)
        mediator = np.asarray(mediator, dtype=float)
        exposure = np.asarray(exposure, dtype=float)
        n = outcome.shape[0]
        if confounders is None:
            confounders = np.zeros((n, len(confounder_names)))
        confounders = np.asarray(confounders, dtype=float)
        if confounders.ndim == 1:
            confounders = confounders[:, None]
        records = tuple(
            ObservedRecord(outcome[i], mediator[i], exposure[i], confounders[i])
            for i in range(n)
        )
        return cls(records, tuple(confounder_names))

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def n_confounders(self) -> int:
        return len(self.confounder_names)

    def arrays(self):
        """Return (outcome, mediator, exposure, confounders) as ndarrays."""
        y = np.array([r.outcome for r in self.records])
        m = np.array([r.mediator for r in self.records])
        x = np.array([r.exposure for r in self.records])
        z = np.array([r.confounders for r in self.records]).reshape(self.n, self.n_confounders)
        return y, m, x, z

    def has_noninteger_mediators(self) -> bool:
        m = np.array([r.mediator for r in self.records])
        return bool(np.any(m != np.floor(m)))

    def confounder_means(self) -> np.ndarray:
        if self.n_confounders == 0:
            return np.zeros(0)
        return np.array([r.confounders for r in self.records]).mean(axis=0)


@dataclass(frozen=True)
class ModelConfig:
    """Configuration for model fitting and selection.

    ``family=None`` means automatic: the candidate grid spans all families
    compatible with the data.  ``false_zero_bound`` is the known threshold
    above which a positive mediator can never be observed as zero; it must
    be a positive integer when a count family is in play.
    """

    family: MediatorFamily | None = None
    k_range: tuple[int, int] = (1, 3)
    false_zero_bound: float = 20.0
    exposure_nonzero_interaction: bool = True
    exposure_mediator_interaction: bool = True
    max_em_iter: int = 500
    loglik_rel_tol: float = 1e-8
    n_starts: int = 5
    quadrature_abs_tol: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.k_range
        if not (1 <= lo <= hi <= 10):
            raise ConfigError(f"k_range must satisfy 1 <= lo <= hi <= 10, got {self.k_range}")
        if not (self.false_zero_bound > 0 and math.isfinite(self.false_zero_bound)):
            raise ConfigError(f"false_zero_bound must be positive, got {self.false_zero_bound}")
        if self.loglik_rel_tol <= 0 or self.quadrature_abs_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if self.max_em_iter < 1 or self.n_starts < 1:
            raise ConfigError("max_em_iter and n_starts must be >= 1")

    def validate_for_family(self, family: MediatorFamily) -> None:
        if family.is_count and self.false_zero_bound != int(self.false_zero_bound):
            raise ConfigError(
                f"false_zero_bound must be an integer for count family {family.value}, "
                f"got {self.false_zero_bound}"
            )

    def with_(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class ParameterSet:
    """Full parameter vector of the mediation model.

    Outcome model (Gaussian):
        E(Y | m, b, x, z) = y_intercept + y_mediator*m + y_nonzero*b
                            + y_exposure*x + y_exposure_nonzero*x*b
                            + y_exposure_mediator*x*m + y_confounders.z
        with residual standard deviation ``resid_sd``.

    Mediator mixture: per-component linear predictors on the family link
    scale (identity for the log-normal log-mean, log link for Poisson and
    negative binomial means)::

        loc_k(x, z) = comp_intercepts[k] + comp_slopes[k]*x + comp_confounders.z

    Zero model (logit scale): the total structural-zero probability for the
    log-normal family, or the excess-zero probability for count families::

        logit = zero_intercept + zero_exposure*x + zero_confounders.z

    ``mix_weights`` is a simplex over the K components.  ``log_scale_sd``
    (log-normal only) and ``dispersion`` (negative binomial only) are shared
    across components.  ``false_zero_rate`` drives the masking probability
    exp(-rate^2 * m) for true values m <= false_zero_bound.
    """

    y_intercept: float
    y_mediator: float
    y_nonzero: float
    y_exposure: float
    y_exposure_nonzero: float
    y_exposure_mediator: float
    y_confounders: np.ndarray
    resid_sd: float
    comp_intercepts: np.ndarray
    comp_slopes: np.ndarray
    comp_confounders: np.ndarray
    zero_intercept: float
    zero_exposure: float
    zero_confounders: np.ndarray
    mix_weights: np.ndarray
    false_zero_rate: float
    log_scale_sd: float | None = None
    dispersion: float | None = None

    def __post_init__(self):
        for name in ("y_confounders", "comp_intercepts", "comp_slopes",
                     "comp_confounders", "zero_confounders", "mix_weights"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))

    @property
    def k(self) -> int:
        return self.mix_weights.shape[0]

    @property
    def n_confounders(self) -> int:
        return self.y_confounders.shape[0]

    def as_dict(self) -> dict:
        """Plain-Python representation (arrays become lists); JSON-friendly."""
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            out[name] = value.tolist() if isinstance(value, np.ndarray) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ParameterSet":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown parameter fields: {sorted(unknown)}")
        return cls(**data)

    def canonicalized(self) -> "ParameterSet":
        """Reorder components so comp_intercepts is nondecreasing.

        Resolves mixture label switching; the likelihood is invariant.
        """
        order = np.argsort(self.comp_intercepts, kind="stable")
        if np.array_equal(order, np.arange(self.k)):
            return self
        return replace(
            self,
            comp_intercepts=self.comp_intercepts[order],
            comp_slopes=self.comp_slopes[order],
            mix_weights=self.mix_weights[order],
        )

    def with_(self, **kwargs) -> "ParameterSet":
        return replace(self, **kwargs)


def validate_parameters(theta: ParameterSet, family: MediatorFamily, k: int,
                        n_confounders: int, require_order: bool = True) -> None:
    """Check shape, positivity, simplex and ordering invariants."""
    if theta.k != k:
        raise ConfigError(f"parameter set has K={theta.k}, expected {k}")
    for name in ("comp_intercepts", "comp_slopes"):
        if getattr(theta, name).shape != (k,):
            raise ConfigError(f"{name} must have shape ({k},)")
    for name in ("y_confounders", "comp_confounders", "zero_confounders"):
        if getattr(theta, name).shape != (n_confounders,):
            raise ConfigError(f"{name} must have shape ({n_confounders},)")
    for name in ("resid_sd", "false_zero_rate"):
        if not (getattr(theta, name) > 0):
            raise ConfigError(f"{name} must be strictly positive")
    if family is MediatorFamily.ZILONM:
        if theta.log_scale_sd is None or not theta.log_scale_sd > 0:
            raise ConfigError("log_scale_sd must be set and positive for the log-normal family")
    elif theta.log_scale_sd is not None:
        raise ConfigError(f"log_scale_sd is only valid for {MediatorFamily.ZILONM.value}")
    if family is MediatorFamily.ZINBM:
        if theta.dispersion is None or not theta.dispersion > 0:
            raise ConfigError("dispersion must be set and positive for the negative binomial family")
    elif theta.dispersion is not None:
        raise ConfigError(f"dispersion is only valid for {MediatorFamily.ZINBM.value}")
    w = theta.mix_weights
    if np.any(w <= 0) or np.any(w >= 1) and k > 1:
        raise ConfigError("mix_weights entries must lie in (0, 1)")
    if abs(float(w.sum()) - 1.0) > 1e-12:
        raise ConfigError(f"mix_weights must sum to 1, got {w.sum()!r}")
    scalars = [theta.y_intercept, theta.y_mediator, theta.y_nonzero, theta.y_exposure,
               theta.y_exposure_nonzero, theta.y_exposure_mediator,
               theta.zero_intercept, theta.zero_exposure]
    if not np.all(np.isfinite(scalars)):
        raise ConfigError("all coefficients must be finite")
    if require_order and np.any(np.diff(theta.comp_intercepts) < 0):
        raise ConfigError("components must be ordered by nondecreasing comp_intercepts")


class ParameterSpace:
    """Bijection between a ParameterSet and an unconstrained real vector.

    Positive scalars map through log; the mixing simplex maps through the
    additive log-ratio transform with the last component as reference
    (contributing K-1 coordinates, none for K=1); everything else is the
    identity.  Interaction coefficients can be pinned to zero, in which
    case they contribute no coordinates and unpack as exactly 0.0.

    The coordinate count of this space is the free-parameter count used in
    the BIC/AIC penalties.
    """

    def __init__(self, family: MediatorFamily, k: int, n_confounders: int = 0,
                 exposure_nonzero_interaction: bool = True,
                 exposure_mediator_interaction: bool = True):
        if k < 1:
            raise ConfigError(f"K must be >= 1, got {k}")
        self.family = family
        self.k = k
        self.n_confounders = n_confounders
        self.exposure_nonzero_interaction = exposure_nonzero_interaction
        self.exposure_mediator_interaction = exposure_mediator_interaction
        self.names = self._build_names()

    @classmethod
    def for_config(cls, family: MediatorFamily, k: int, n_confounders: int,
                   config: ModelConfig) -> "ParameterSpace":
        return cls(family, k, n_confounders,
                   exposure_nonzero_interaction=config.exposure_nonzero_interaction,
                   exposure_mediator_interaction=config.exposure_mediator_interaction)

    def _build_names(self) -> tuple[str, ...]:
        names = ["y_intercept", "y_mediator", "y_nonzero", "y_exposure"]
        if self.exposure_nonzero_interaction:
            names.append("y_exposure_nonzero")
        if self.exposure_mediator_interaction:
            names.append("y_exposure_mediator")
        names += [f"y_confounder_{j}" for j in range(self.n_confounders)]
        names.append("log_resid_sd")
        names += [f"comp_intercept_{j}" for j in range(self.k)]
        names += [f"comp_slope_{j}" for j in range(self.k)]
        names += [f"comp_confounder_{j}" for j in range(self.n_confounders)]
        names += ["zero_intercept", "zero_exposure"]
        names += [f"zero_confounder_{j}" for j in range(self.n_confounders)]
        names += [f"mix_alr_{j}" for j in range(self.k - 1)]
        if self.family is MediatorFamily.ZILONM:
            names.append("log_scale_sd_log")
        if self.family is MediatorFamily.ZINBM:
            names.append("log_dispersion")
        names.append("log_false_zero_rate")
        return tuple(names)

    @property
    def size(self) -> int:
        return len(self.names)

    def pack(self, theta: ParameterSet) -> np.ndarray:
        if theta.k != self.k or theta.n_confounders != self.n_confounders:
            raise ConfigError(
                f"parameter set (K={theta.k}, p={theta.n_confounders}) does not match "
                f"space (K={self.k}, p={self.n_confounders})"
            )
        if self.family is MediatorFamily.ZILONM and theta.log_scale_sd is None:
            raise ConfigError("missing log_scale_sd for the log-normal family")
        if self.family is MediatorFamily.ZINBM and theta.dispersion is None:
            raise ConfigError("missing dispersion for the negative binomial family")
        out = [theta.y_intercept, theta.y_mediator, theta.y_nonzero, theta.y_exposure]
        if self.exposure_nonzero_interaction:
            out.append(theta.y_exposure_nonzero)
        if self.exposure_mediator_interaction:
            out.append(theta.y_exposure_mediator)
        out += list(theta.y_confounders)
        out.append(math.log(theta.resid_sd))
        out += list(theta.comp_intercepts)
        out += list(theta.comp_slopes)
        out += list(theta.comp_confounders)
        out += [theta.zero_intercept, theta.zero_exposure]
        out += list(theta.zero_confounders)
        w = theta.mix_weights
        out += list(np.log(w[:-1]) - math.log(w[-1]))
        if self.family is MediatorFamily.ZILONM:
            out.append(math.log(theta.log_scale_sd))
        if self.family is MediatorFamily.ZINBM:
            out.append(math.log(theta.dispersion))
        out.append(math.log(theta.false_zero_rate))
        return np.array(out)

    def unpack(self, vec: np.ndarray) -> ParameterSet:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ConfigError(f"free vector must have shape ({self.size},), got {vec.shape}")
        pos = 0

        def take(count: int) -> np.ndarray:
            nonlocal pos
            chunk = vec[pos:pos + count]
            pos += count
            return chunk

        def take_positive() -> float:
            # clip so optimizer trial points can never overflow exp()
            return math.exp(min(max(take(1)[0], -300.0), 300.0))

        p, k = self.n_confounders, self.k
        y_int, y_med, y_nz, y_exp = take(4)
        y_exp_nz = take(1)[0] if self.exposure_nonzero_interaction else 0.0
        y_exp_med = take(1)[0] if self.exposure_mediator_interaction else 0.0
        y_conf = take(p)
        resid_sd = take_positive()
        comp_int = take(k)
        comp_slope = take(k)
        comp_conf = take(p)
        zero_int, zero_exp = take(2)
        zero_conf = take(p)
        alr = take(k - 1)
        full = np.concatenate([alr, [0.0]])
        full = full - full.max()  # overflow guard in the softmax
        w = np.exp(full)
        w = w / w.sum()
        log_scale_sd = take_positive() if self.family is MediatorFamily.ZILONM else None
        dispersion = take_positive() if self.family is MediatorFamily.ZINBM else None
        false_zero_rate = take_positive()
        return ParameterSet(
            y_intercept=y_int, y_mediator=y_med, y_nonzero=y_nz, y_exposure=y_exp,
            y_exposure_nonzero=y_exp_nz, y_exposure_mediator=y_exp_med,
            y_confounders=y_conf, resid_sd=resid_sd,
            comp_intercepts=comp_int, comp_slopes=comp_slope, comp_confounders=comp_conf,
            zero_intercept=zero_int, zero_exposure=zero_exp, zero_confounders=zero_conf,
            mix_weights=w, false_zero_rate=false_zero_rate,
            log_scale_sd=log_scale_sd, dispersion=dispersion,
        )


def free_vector(theta: ParameterSet, family: MediatorFamily, k: int) -> np.ndarray:
    """Flatten a ParameterSet onto unconstrained coordinates (full space)."""
    return ParameterSpace(family, k, theta.n_confounders).pack(theta)


def theta_from_free(vec: np.ndarray, family: MediatorFamily, k: int,
                    n_confounders: int = 0) -> ParameterSet:
    """Inverse of :func:`free_vector`."""
    return ParameterSpace(family, k, n_confounders).unpack(vec)


@dataclass(frozen=True)
class FittedModel:
    """Maximum likelihood fit of one (family, K) candidate."""

    family: MediatorFamily
    k: int
    config: ModelConfig
    theta_hat: ParameterSet
    loglik: float
    n_iter: int
    converged: bool
    info_matrix: np.ndarray
    vcov: np.ndarray
    n_params: int
    bic: float
    aic: float
    degenerate_flags: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "info_matrix", _frozen_array(self.info_matrix))
        object.__setattr__(self, "vcov", _frozen_array(self.vcov))
        object.__setattr__(self, "degenerate_flags", tuple(self.degenerate_flags))

    @property
    def parameter_space(self) -> ParameterSpace:
        return ParameterSpace.for_config(self.family, self.k,
                                         self.theta_hat.n_confounders, self.config)


@dataclass(frozen=True)
class EffectEstimate:
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float


@dataclass(frozen=True)
class EffectTable:
    """Point estimates and Wald inference for the mediation decomposition.

    ``nie`` is exactly ``nie1 + nie2`` and ``te`` exactly ``nie + nde``.
    """

    x1: float
    x2: float
    z_ref: np.ndarray
    nie1: EffectEstimate
    nie2: EffectEstimate
    nie: EffectEstimate
    nde: EffectEstimate
    te: EffectEstimate

    def __post_init__(self):
        object.__setattr__(self, "z_ref", _frozen_array(self.z_ref))

    def as_dict(self) -> dict[str, EffectEstimate]:
        return {"NIE1": self.nie1, "NIE2": self.nie2, "NIE": self.nie,
                "NDE": self.nde, "TE": self.te}
