"""Collapse-model stochastic Schrödinger equations on small Hilbert spaces."""

from collapse_sde.errors import SimulationError
from collapse_sde.hilbert import DensityMatrix, HermitianOperator, ProjectorSet, StateVector
from collapse_sde.models import ModelSpec, Variant, derive_fdr_params
from collapse_sde.noise import ColoredNoiseState, NoiseKind, RandomStream
from collapse_sde.sde import IntegratorConfig, run_trajectory

__all__ = [
    "ColoredNoiseState",
    "DensityMatrix",
    "HermitianOperator",
    "IntegratorConfig",
    "ModelSpec",
    "NoiseKind",
    "ProjectorSet",
    "RandomStream",
    "SimulationError",
    "StateVector",
    "Variant",
    "derive_fdr_params",
    "run_trajectory",
]
