"""Batched multi-chain MCMC on numpy arrays with the chain axis first."""

from batchmc.composition import (
    Affine,
    Exp,
    Identity,
    SimpleStepSizeAdaptation,
    Softplus,
    TransformedTransitionKernel,
)
from batchmc.diagnostics import diagnostics_report, effective_sample_size, potential_scale_reduction
from batchmc.driver import sample_chain
from batchmc.errors import BatchSemanticsError, ContractError, ShapeError
from batchmc.hmc import HamiltonianMonteCarlo, UncalibratedHamiltonianMonteCarlo
from batchmc.kernel import TransitionKernel
from batchmc.metropolis import MetropolisHastings, RandomWalkMetropolis, UncalibratedRandomWalk
from batchmc.numerics import RngKey
from batchmc.nuts import NoUTurnSampler
from batchmc.replica_exchange import ReplicaExchangeMC

__version__ = "0.1.0"

__all__ = [
    "Affine",
    "BatchSemanticsError",
    "ContractError",
    "Exp",
    "HamiltonianMonteCarlo",
    "Identity",
    "MetropolisHastings",
    "NoUTurnSampler",
    "RandomWalkMetropolis",
    "ReplicaExchangeMC",
    "RngKey",
    "ShapeError",
    "SimpleStepSizeAdaptation",
    "Softplus",
    "TransformedTransitionKernel",
    "TransitionKernel",
    "UncalibratedHamiltonianMonteCarlo",
    "UncalibratedRandomWalk",
    "diagnostics_report",
    "effective_sample_size",
    "potential_scale_reduction",
    "sample_chain",
]
