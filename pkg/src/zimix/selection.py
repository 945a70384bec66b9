"""Candidate grid over (family, K) and BIC-based selection."""

from __future__ import annotations

from dataclasses import dataclass

from .em import fit, with_information
from .exceptions import DataError, FitError
from .model import Dataset, FittedModel, MediatorFamily, ModelConfig

__all__ = ["CandidateResult", "candidate_grid", "select"]

FAMILY_ORDER = (MediatorFamily.ZILONM, MediatorFamily.ZIPM, MediatorFamily.ZINBM)

# flags that disqualify a fit from being selected as best (it stays in the
# table); near-singular covariance alone does not bias the likelihood
DISQUALIFYING_FLAGS = frozenset({
    "mix_weight_small",
    "component_collision",
    "resid_sd_bound",
    "log_scale_sd_bound",
})


@dataclass(frozen=True)
class CandidateResult:
    family: MediatorFamily
    k: int
    loglik: float
    n_params: int
    bic: float
    aic: float
    converged: bool
    degenerate_flags: tuple[str, ...]


def candidate_grid(dataset: Dataset, config: ModelConfig) -> list[tuple[MediatorFamily, int]]:
    """Cartesian product of admissible families and the requested K range.

    Count families are excluded automatically when the data contain
    non-integer mediator values; requesting one explicitly in that case is
    an error.
    """
    noninteger = dataset.has_noninteger_mediators()
    if config.family is not None:
        if config.family.is_count and noninteger:
            raise DataError(
                f"family {config.family.value} requires integer mediator values"
            )
        families = [config.family]
    else:
        families = [f for f in FAMILY_ORDER if not (f.is_count and noninteger)]
    for fam in families:
        config.validate_for_family(fam)
    lo, hi = config.k_range
    grid = [(fam, k) for fam in families for k in range(lo, hi + 1)]
    if not grid:
        raise DataError("empty candidate grid")
    return grid


def _is_eligible(model: FittedModel) -> bool:
    return model.converged and not (set(model.degenerate_flags) & DISQUALIFYING_FLAGS)


def select(dataset: Dataset, config: ModelConfig) -> tuple[FittedModel, list[CandidateResult]]:
    """Fit every candidate and pick the minimum-BIC proper fit.

    Ties break toward smaller K, then family order.  Degenerate fits are
    kept in the table but only chosen when no proper fit converged.
    """
    grid = candidate_grid(dataset, config)
    fits: list[FittedModel] = []
    for idx, (family, k) in enumerate(grid):
        candidate_config = config.with_(family=family, seed=config.seed ^ idx)
        # the covariance is only needed for the winner; skip it here
        fits.append(fit(dataset, family, k, candidate_config, compute_information=False))

    table = [
        CandidateResult(m.family, m.k, m.loglik, m.n_params, m.bic, m.aic,
                        m.converged, m.degenerate_flags)
        for m in fits
    ]
    eligible = [m for m in fits if _is_eligible(m)]
    if not eligible:
        eligible = [m for m in fits if m.converged]
    if not eligible:
        raise FitError("no candidate model converged")
    best = min(eligible, key=lambda m: (m.bic, m.k, FAMILY_ORDER.index(m.family)))
    return with_information(best, dataset), table
