"""Shared fixtures for the collapse-model suite."""

from __future__ import annotations

import logging

import numpy as np
import pytest

from collapse_sde.hilbert import ProjectorSet, StateVector, canonical_projectors, random_state
from collapse_sde.models import ModelSpec, Variant, derive_fdr_params

log = logging.getLogger(__name__)


def dense_shift(projectors: ProjectorSet, psi: np.ndarray) -> list[np.ndarray]:
    """``(P_k − ⟨P_k⟩)`` as dense matrices, for reference evaluations."""
    norm = np.vdot(psi, psi).real
    shifts = []
    for p in projectors.matrices():
        mean = np.vdot(psi, p @ psi).real / norm
        shifts.append(p - mean * np.eye(projectors.dim))
    return shifts


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def make_spec():
    """Build a model spec, deriving the FDR parameters unless ``fdr=False``."""

    def factory(variant: Variant | str, n_dim: int = 2, fdr: bool = True, **params):
        variant = Variant(variant)
        params.setdefault("script_j", 1.0)
        params.setdefault("n_size", 1.0)
        projectors = params.pop("projectors", None) or canonical_projectors(n_dim)
        if variant.is_colored:
            params.setdefault("tau", 0.1)
        spec = ModelSpec(variant, projectors, **params)
        return derive_fdr_params(spec) if fdr else spec

    return factory


@pytest.fixture
def random_states(rng):
    def factory(n_dim: int, count: int = 100) -> list[StateVector]:
        return [random_state(n_dim, rng) for _ in range(count)]

    return factory


@pytest.fixture(scope="session")
def run_cli():
    """Run the command line in-process; returns ``(exit_code, stdout, stderr)``."""
    from collapse_sde.cli import main

    def factory(capsys, *argv: str):
        code = main(list(argv))
        captured = capsys.readouterr()
        if code:
            log.info("collapse-sde %s exited %d: %s", " ".join(argv), code, captured.err)
        return code, captured.out, captured.err

    return factory
