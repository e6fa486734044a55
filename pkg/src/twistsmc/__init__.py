"""Twisted sequential Monte Carlo for factor-graph models.

Twisting functions built from deterministic approximations (loopy belief
propagation, expectation propagation, Laplace) steer the intermediate SMC
targets toward the posterior while the final target, and therefore the
unbiasedness of the normalizing-constant estimate, stays untouched.
"""

from . import cli, gmrf, graph, lbp, lda, models, oracle, smc, twist
from .graph import (
    FactorGraph,
    FactorPartition,
    VariableOrder,
    identity_order,
    load_graph,
    make_graph,
    partition_factors,
    reorder,
    save_graph,
    validate,
)
from .smc import (
    ParticleSystem,
    Proposal,
    SequentialModel,
    SmcConfig,
    SmcResult,
    ess,
    log_normalizing_constant,
    reconstruct_trajectory,
    resample,
    run_sis,
    run_smc,
)
from .twist import (
    TwistingSet,
    UnitTwisting,
    fully_adapt_discrete,
    make_twisted_model,
    optimal_twisting_enumerate,
    regularize,
)

__version__ = "0.1.0"

__all__ = [
    "FactorGraph",
    "FactorPartition",
    "ParticleSystem",
    "Proposal",
    "SequentialModel",
    "SmcConfig",
    "SmcResult",
    "TwistingSet",
    "UnitTwisting",
    "VariableOrder",
    "cli",
    "ess",
    "fully_adapt_discrete",
    "gmrf",
    "graph",
    "identity_order",
    "lbp",
    "lda",
    "load_graph",
    "log_normalizing_constant",
    "make_graph",
    "make_twisted_model",
    "models",
    "optimal_twisting_enumerate",
    "oracle",
    "partition_factors",
    "reconstruct_trajectory",
    "regularize",
    "reorder",
    "resample",
    "run_sis",
    "run_smc",
    "save_graph",
    "smc",
    "twist",
    "validate",
]
