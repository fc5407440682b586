"""Noise-averaged dynamics: the dephasing GKSL master equation.

``ħ ∂ρ/∂t = −i[H, ρ] + 𝒥𝒩(Σ_k P_k ρ P_k − ρ)``

With diagonal projectors ``Σ_k P_k ρ P_k`` is ``ρ`` masked to same-cell entries, so the
right-hand side is two elementwise products and a commutator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Final

import numpy as np
import numpy.typing as npt

from collapse_sde.errors import MasterError
from collapse_sde.hilbert import (
    ComplexArray,
    DensityMatrix,
    RealArray,
    density_violations,
    pure_projector,
)

if TYPE_CHECKING:
    from collapse_sde.models import ModelSpec
    from collapse_sde.stats import EnsembleSummary

log = logging.getLogger(__name__)

SNAPSHOT_HERMITIAN_TOL: Final = 1e-10
SNAPSHOT_TRACE_TOL: Final = 1e-10
SNAPSHOT_EIGENVALUE_TOL: Final = 1e-8
#: absolute slack added to Monte Carlo bands so a zero standard error still admits rounding
COMPARISON_FLOOR: Final = 1e-12


@dataclass(frozen=True)
class MasterConfig:
    dt: float
    t_max: float
    record_stride: int = 1

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise MasterError("dt must be positive", dt=self.dt)
        if not self.t_max >= 0:
            raise MasterError("t_max must be nonnegative", t_max=self.t_max)
        if self.record_stride < 1:
            raise MasterError("record_stride must be at least 1", record_stride=self.record_stride)

    @property
    def n_steps(self) -> int:
        ratio = self.t_max / self.dt
        nearest = round(ratio)
        return int(nearest) if abs(ratio - nearest) <= 1e-9 * max(ratio, 1.0) else math.ceil(ratio)


@dataclass(frozen=True, eq=False)
class MasterSolution:
    times: RealArray
    #: (T, N, N)
    states: ComplexArray
    rho0: DensityMatrix
    spec: ModelSpec

    def index_of(self, t: float) -> int:
        index = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[index] - t) > 1e-9 * max(1.0, abs(t)):
            raise MasterError("no snapshot at the requested time", t=t, nearest=float(self.times[index]))
        return index

    def at(self, t: float) -> DensityMatrix:
        return DensityMatrix(self.states[self.index_of(t)])

    def purities(self) -> RealArray:
        return np.real(np.einsum("tij,tji->t", self.states, self.states))

    def populations(self) -> RealArray:
        diagonals = np.real(np.einsum("tii->ti", self.states))
        return diagonals @ self.spec.projectors.membership

    def coherence(self, j: int, k: int) -> ComplexArray:
        return self.states[:, j, k]

    def columns(self) -> list[str]:
        n = self.rho0.dim
        names = ["t"]
        for j in range(n):
            for k in range(n):
                names += [f"re_rho_{j}{k}", f"im_rho_{j}{k}"]
        return [*names, "purity"]

    def table(self) -> RealArray:
        """Rows ``t, re ρ_00, im ρ_00, re ρ_01, …, purity`` with ρ flattened row-major."""
        flat = self.states.reshape(self.times.size, -1)
        pairs = np.stack([flat.real, flat.imag], axis=-1).reshape(self.times.size, -1)
        return np.column_stack([self.times, pairs, self.purities()])


@dataclass(frozen=True)
class MasterComparison:
    time: float
    #: max entrywise |E[|ψ⟩⟨ψ|] − ρ|
    deviation: float
    #: allowed deviation at the entry closest to its band
    threshold: float
    passed: bool


def _rhs(spec: ModelSpec, rho: ComplexArray) -> ComplexArray:
    dephasing = spec.script_j * spec.n_size * (np.where(spec.projectors.same_cell, rho, 0) - rho)
    if spec.has_hamiltonian:
        assert spec.hamiltonian is not None
        h = spec.hamiltonian.entries
        dephasing = dephasing - 1j * (h @ rho - rho @ h)
    return dephasing / spec.hbar


def gksl_rhs(spec: ModelSpec, rho: DensityMatrix | npt.ArrayLike) -> ComplexArray:
    """``∂ρ/∂t``, i.e. the master-equation right-hand side divided by ħ."""
    entries = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=np.complex128)
    if entries.shape != (spec.dim, spec.dim):
        raise MasterError("density matrix and model dimensions differ", shape=entries.shape, dim=spec.dim)
    return _rhs(spec, entries)


def _validate_snapshot(entries: ComplexArray, step: int, t: float) -> None:
    problems = density_violations(
        entries,
        hermitian_tol=SNAPSHOT_HERMITIAN_TOL,
        trace_tol=SNAPSHOT_TRACE_TOL,
        eigenvalue_tol=SNAPSHOT_EIGENVALUE_TOL,
    )
    if problems:
        raise MasterError(f"step {step}: " + "; ".join(problems), step=step, t=t)


def integrate_master(spec: ModelSpec, rho0: DensityMatrix, config: MasterConfig) -> MasterSolution:
    """Classical RK4 on the master equation, validating every recorded snapshot."""
    if rho0.dim != spec.dim:
        raise MasterError("density matrix and model dimensions differ", rho=rho0.dim, model=spec.dim)
    dt = config.dt
    rho = np.array(rho0.entries, dtype=np.complex128)
    times = [0.0]
    states = [rho.copy()]
    for step in range(1, config.n_steps + 1):
        k1 = _rhs(spec, rho)
        k2 = _rhs(spec, rho + (dt / 2) * k1)
        k3 = _rhs(spec, rho + (dt / 2) * k2)
        k4 = _rhs(spec, rho + dt * k3)
        rho = rho + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if step % config.record_stride == 0 or step == config.n_steps:
            _validate_snapshot(rho, step, step * dt)
            times.append(step * dt)
            states.append(rho.copy())
    log.debug("master equation: %d steps, %d snapshots", config.n_steps, len(times))
    return MasterSolution(np.array(times), np.array(states), rho0, spec)


def closed_form_dephasing(rho0: DensityMatrix, spec: ModelSpec, t: float) -> DensityMatrix:
    """Exact H = 0 solution: same-cell entries fixed, the rest decaying as ``e^{−Γt}``."""
    if spec.has_hamiltonian:
        raise MasterError("the closed form holds only without a Hamiltonian")
    if rho0.dim != spec.dim:
        raise MasterError("density matrix and model dimensions differ", rho=rho0.dim, model=spec.dim)
    decay = math.exp(-spec.collapse_rate * t)
    return DensityMatrix(np.where(spec.projectors.same_cell, rho0.entries, rho0.entries * decay))


def energy_series(solution: MasterSolution) -> RealArray:
    """Tr[ρH] at each snapshot."""
    hamiltonian = solution.spec.hamiltonian
    if hamiltonian is None:
        raise MasterError("energy series needs a Hamiltonian")
    return np.real(np.einsum("tij,ji->t", solution.states, hamiltonian.entries))


def compare_ensemble_to_master(
    ensemble: EnsembleSummary, solution: MasterSolution, t: float, n_sigma: float = 3.0
) -> MasterComparison:
    """Bound ``E[|ψ⟩⟨ψ|](t) − ρ(t)`` entrywise by ``n_sigma`` Monte Carlo standard errors.

    Real and imaginary parts are banded separately; the reported threshold is the band of
    the entry that came closest to leaving it.
    """
    if ensemble.spec.describe() != solution.spec.describe():
        raise MasterError("ensemble and master solution use different models")
    if not ensemble.spec.fdr_enforced:
        raise MasterError("the averaged dynamics are linear only with the FDR enforced")
    expected_rho0 = pure_projector(ensemble.psi0).entries
    if np.max(np.abs(expected_rho0 - solution.rho0.entries)) > SNAPSHOT_TRACE_TOL:
        raise MasterError("ensemble and master solution start from different states")
    slot = ensemble.checkpoint_index(t)
    mean = ensemble.density_mean[slot]
    stderr = ensemble.density_stderr[slot]
    difference = mean - solution.at(t).entries
    bands = [n_sigma * stderr.real + COMPARISON_FLOOR, n_sigma * stderr.imag + COMPARISON_FLOOR]
    ratios = np.maximum(np.abs(difference.real) / bands[0], np.abs(difference.imag) / bands[1])
    worst = np.unravel_index(int(np.argmax(ratios)), ratios.shape)
    use_real = abs(difference.real[worst]) / bands[0][worst] >= abs(difference.imag[worst]) / bands[1][worst]
    threshold = float((bands[0] if use_real else bands[1])[worst])
    comparison = MasterComparison(
        time=t,
        deviation=float(np.max(np.abs(difference))),
        threshold=threshold,
        passed=bool(np.all(ratios <= 1)),
    )
    log.info("ensemble vs master at t=%g: deviation %.3g, band %.3g", t, comparison.deviation, threshold)
    return comparison
