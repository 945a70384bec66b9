"""Causal mediation analysis for zero-inflated mixture mediators.

Estimates natural direct and indirect effects (with the two-part indirect
decomposition through the mediator's numerical change and its zero/non-zero
status) when the mediator follows a zero-inflated log-normal, Poisson or
negative binomial mixture observed through a false-zero masking mechanism.
Maximum likelihood via EM over latent component membership and latent
true/false-zero status; delta-method inference; BIC selection over the
mixture order and family; and a replication harness for simulation studies.
"""

from .effects import effect_table, nde, nie1, nie2
from .em import PosteriorWeights, e_step, fit, fit_detailed, m_step, observed_information
from .exceptions import (
    ConfigError,
    DataError,
    FitError,
    QuadratureError,
    ZimixError,
)
from .model import (
    Dataset,
    EffectEstimate,
    EffectTable,
    FittedModel,
    MediatorFamily,
    ModelConfig,
    ObservedRecord,
    ParameterSet,
    ParameterSpace,
    free_vector,
    theta_from_free,
)
from .selection import CandidateResult, candidate_grid, select
from .simulate import (
    SimDesign,
    SimulationReport,
    builtin_design,
    builtin_design_names,
    generate_dataset,
    replicate_study,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "CandidateResult",
    "ConfigError",
    "DataError",
    "Dataset",
    "EffectEstimate",
    "EffectTable",
    "FitError",
    "FittedModel",
    "MediatorFamily",
    "ModelConfig",
    "ObservedRecord",
    "ParameterSet",
    "ParameterSpace",
    "PosteriorWeights",
    "QuadratureError",
    "SimDesign",
    "SimulationReport",
    "ZimixError",
    "builtin_design",
    "builtin_design_names",
    "candidate_grid",
    "e_step",
    "effect_table",
    "fit",
    "fit_detailed",
    "free_vector",
    "generate_dataset",
    "m_step",
    "nde",
    "nie1",
    "nie2",
    "observed_information",
    "replicate_study",
    "select",
    "theta_from_free",
]
