"""Right-hand sides of the collapse models.

Unit convention, shared by every variant:

* ``Γ = 𝒥𝒩/ħ`` is the collapse rate (`ModelSpec.collapse_rate`);
* ``κ = 𝒟𝒩²/ħ²`` is the white-noise channel strength (`ModelSpec.channel_strength`); each
  channel operator ``A`` enters the diffusion as ``√κ (A − ⟨A⟩)ψ``.

Two-state variants carry one channel, ``A = σ_z`` (so ``(√𝒟/ħ)(Ŝ_z − ⟨Ŝ_z⟩)`` with
``Ŝ_z = 𝒩σ_z``) and the fluctuation-dissipation relation (FDR) reads ``ħ𝒥 = 2𝒟𝒩``. N-state
and colored variants carry one channel per projector, ``A = P_k``, and the FDR reads
``ħ𝒥 = 𝒟𝒩``, i.e. ``J = 𝒟`` once ħ = 1 and 𝒩 is absorbed into the couplings. The two agree
because ``(σ_z − ⟨σ_z⟩)ψ = 2(P_0 − ⟨P_0⟩)ψ`` while two unit channels combine into one of
variance two.

All projectors are diagonal, so every term below is an elementwise product over basis
indices; ``labels[n]`` is the projector containing basis state ``n``. Kernels accept stacked
states of shape ``(..., N)`` and use expectations normalized by ``⟨ψ|ψ⟩``.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Final

import numpy as np
import numpy.typing as npt

from collapse_sde.errors import FDRError, ModelError
from collapse_sde.hilbert import (
    ComplexArray,
    DensityMatrix,
    HermitianOperator,
    ProjectorSet,
    RealArray,
    StateVector,
)
from collapse_sde.noise import ColoredNoiseState, NoiseKind

if TYPE_CHECKING:
    from collections.abc import Callable

log = logging.getLogger(__name__)

FDR_RTOL: Final = 1e-12
#: default step resolves the collapse time 1/Γ with this many steps per unit
DT_PER_COLLAPSE_TIME: Final = 0.01
COLORED_DT_RATIO: Final = 0.1


class Variant(enum.Enum):
    TWO_STATE_STRAT = "TwoStateStrat"
    TWO_STATE_ITO = "TwoStateIto"
    N_STATE_STRAT = "NStateStrat"
    N_STATE_ITO = "NStateIto"
    COLORED_N_STATE = "ColoredNState"

    @property
    def is_two_state(self) -> bool:
        return self in (Variant.TWO_STATE_STRAT, Variant.TWO_STATE_ITO)

    @property
    def is_ito(self) -> bool:
        return self in (Variant.TWO_STATE_ITO, Variant.N_STATE_ITO)

    @property
    def is_stratonovich(self) -> bool:
        return self in (Variant.TWO_STATE_STRAT, Variant.N_STATE_STRAT)

    @property
    def is_colored(self) -> bool:
        return self is Variant.COLORED_N_STATE


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= FDR_RTOL * max(abs(a), abs(b))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Equation variant plus physical parameters.

    ``script_j`` is 𝒥 (energy), ``n_size`` is 𝒩, ``diffusion_d`` is 𝒟 (energy²·time),
    ``noise_g`` is G (energy) and ``tau`` the colored-noise correlation time. 𝒟 and G may be left
    unset and filled by `derive_fdr_params`.
    """

    variant: Variant
    projectors: ProjectorSet
    script_j: float
    n_size: float
    hbar: float = 1.0
    diffusion_d: float | None = None
    noise_g: float | None = None
    tau: float | None = None
    noise_kind: NoiseKind = NoiseKind.OU
    hamiltonian: HermitianOperator | None = None
    fdr_enforced: bool = False

    def __post_init__(self) -> None:
        for name in ("script_j", "n_size", "hbar"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive", **{name: getattr(self, name)})
        for name in ("diffusion_d", "noise_g", "tau"):
            value = getattr(self, name)
            if value is not None and not value >= 0:
                raise ModelError(f"{name} must be nonnegative", **{name: value})
        if self.variant.is_colored and not (self.tau is not None and self.tau > 0):
            raise ModelError("the colored model needs tau > 0", tau=self.tau)
        if self.variant.is_two_state and (self.projectors.dim != 2 or self.projectors.n_projectors != 2):
            raise ModelError("two-state variants need the two canonical projectors", dim=self.projectors.dim)
        if self.hamiltonian is not None and self.hamiltonian.dim != self.projectors.dim:
            raise ModelError(
                "Hamiltonian and projectors act on different spaces",
                hamiltonian=self.hamiltonian.dim,
                projectors=self.projectors.dim,
            )
        if self.fdr_enforced:
            problem = fdr_violation(self)
            if problem:
                raise FDRError(problem, variant=self.variant.value)

    @property
    def dim(self) -> int:
        return self.projectors.dim

    @property
    def n_channels(self) -> int:
        return 1 if self.variant.is_two_state else self.projectors.n_projectors

    @property
    def collapse_rate(self) -> float:
        return self.script_j * self.n_size / self.hbar

    @property
    def channel_strength(self) -> float:
        if self.diffusion_d is None:
            raise ModelError("diffusion_d is unset; fill it with derive_fdr_params", variant=self.variant.value)
        return self.diffusion_d * (self.n_size / self.hbar) ** 2

    @property
    def has_hamiltonian(self) -> bool:
        return self.hamiltonian is not None and not self.hamiltonian.is_zero

    def replace(self, **changes: object) -> ModelSpec:
        return dataclasses.replace(self, **changes)  # type: ignore[arg-type]

    def describe(self) -> dict[str, object]:
        """Plain-data view used for fingerprints and report headers."""
        return {
            "variant": self.variant.value,
            "labels": self.projectors.labels.tolist(),
            "script_j": self.script_j,
            "n_size": self.n_size,
            "hbar": self.hbar,
            "diffusion_d": self.diffusion_d,
            "noise_g": self.noise_g,
            "tau": self.tau,
            "noise_kind": self.noise_kind.value,
            "hamiltonian": None
            if self.hamiltonian is None
            else [[[z.real, z.imag] for z in row] for row in self.hamiltonian.entries.tolist()],
            "fdr_enforced": self.fdr_enforced,
        }


@dataclass(frozen=True, eq=False)
class TermPair:
    """Drift (N,) and diffusion channels (C, N) of one model evaluation."""

    drift: ComplexArray
    diffusion: ComplexArray
    ito: bool

    @property
    def n_channels(self) -> int:
        return int(self.diffusion.shape[0])


def fdr_diffusion(spec: ModelSpec) -> float:
    """Value of 𝒟 that satisfies the white-noise FDR for this variant."""
    scale = 2.0 if spec.variant.is_two_state else 1.0
    return spec.hbar * spec.script_j / (scale * spec.n_size)


def homogenized_diffusion(kind: NoiseKind, noise_g: float, tau: float) -> float:
    """Effective coupling ``𝒟 = 2·E∞[ξ²]·G²·τ``."""
    return 2 * kind.stationary_second_moment * noise_g**2 * tau


def fdr_violation(spec: ModelSpec) -> str | None:
    if spec.diffusion_d is None:
        return "FDR enforced but diffusion_d is unset"
    if spec.variant.is_colored:
        if spec.noise_g is None:
            return "FDR enforced but noise_g is unset"
        assert spec.tau is not None
        expected = homogenized_diffusion(spec.noise_kind, spec.noise_g, spec.tau)
        if not _close(spec.diffusion_d, expected):
            return f"diffusion_d={spec.diffusion_d} but 2·E∞[ξ²]·G²·τ={expected}"
        return None
    expected = fdr_diffusion(spec)
    if not _close(spec.diffusion_d, expected):
        relation = "ħ𝒥 = 2𝒟𝒩" if spec.variant.is_two_state else "ħ𝒥 = 𝒟𝒩"
        return f"diffusion_d={spec.diffusion_d} breaks {relation} (expected {expected})"
    return None


def derive_fdr_params(spec: ModelSpec) -> ModelSpec:
    """Fill the unset noise parameter so the FDR holds, and mark the model as FDR-enforced.

    White-noise variants derive 𝒟 from 𝒥; a preset 𝒟 must already agree. The colored model
    derives 𝒟 from G or G from 𝒟 through ``𝒟 = 2E∞[ξ²]G²τ``; with both unset, 𝒟 takes its
    white-noise FDR value first so that the homogenized limit is the Born-rule model.
    """
    d, g = spec.diffusion_d, spec.noise_g
    if not spec.variant.is_colored:
        if g is not None:
            raise FDRError("noise_g only applies to the colored model", keys=["noise_g"])
        expected = fdr_diffusion(spec)
        if d is not None and not _close(d, expected):
            raise FDRError(
                f"diffusion_d={d} conflicts with the FDR value {expected}",
                keys=["diffusion_d", "script_j"],
            )
        return spec.replace(diffusion_d=expected, fdr_enforced=True)

    assert spec.tau is not None
    second_moment = spec.noise_kind.stationary_second_moment
    if d is not None and g is not None:
        if not _close(d, homogenized_diffusion(spec.noise_kind, g, spec.tau)):
            raise FDRError(
                f"diffusion_d={d} and noise_g={g} violate 𝒟 = 2·E∞[ξ²]·G²·τ",
                keys=["diffusion_d", "noise_g"],
            )
        return spec.replace(fdr_enforced=True)
    if g is not None:
        return spec.replace(diffusion_d=homogenized_diffusion(spec.noise_kind, g, spec.tau), fdr_enforced=True)
    if d is None:
        d = fdr_diffusion(spec)
    return spec.replace(
        diffusion_d=d, noise_g=math.sqrt(d / (2 * second_moment * spec.tau)), fdr_enforced=True
    )


def white_noise_limit(spec: ModelSpec) -> ModelSpec:
    """NStateStrat model that the colored model converges to weakly as τ → 0 at fixed 𝒟."""
    if not spec.variant.is_colored:
        raise ModelError("white-noise limit is defined for the colored model", variant=spec.variant.value)
    limit = ModelSpec(
        Variant.N_STATE_STRAT,
        spec.projectors,
        spec.script_j,
        spec.n_size,
        spec.hbar,
        diffusion_d=spec.diffusion_d,
        hamiltonian=spec.hamiltonian,
    )
    if limit.diffusion_d is not None and fdr_violation(limit) is None:
        return limit.replace(fdr_enforced=True)
    return limit


def default_dt(spec: ModelSpec) -> float:
    """``0.01/Γ`` for white-noise runs, ``min(0.01/Γ, τ/10)`` for colored runs."""
    dt = DT_PER_COLLAPSE_TIME / spec.collapse_rate
    if spec.variant.is_colored:
        assert spec.tau is not None
        dt = min(dt, COLORED_DT_RATIO * spec.tau)
    return dt


# ---------------------------------------------------------------------------
# batched kernels over states of shape (..., N)


def _normalized_populations(spec: ModelSpec, psi: ComplexArray) -> RealArray:
    return spec.projectors.populations(psi)


def _hamiltonian_part(spec: ModelSpec, psi: ComplexArray) -> ComplexArray:
    if not spec.has_hamiltonian:
        return np.zeros_like(psi)
    assert spec.hamiltonian is not None
    applied = np.sum(spec.hamiltonian.entries * psi[..., None, :], axis=-1)
    return (-1j / spec.hbar) * applied


def _sigma_z(spec: ModelSpec) -> RealArray:
    return np.where(spec.projectors.labels == 0, 1.0, -1.0)


def _sigma_shift(spec: ModelSpec, psi: ComplexArray) -> tuple[RealArray, RealArray]:
    """σ_z diagonal and ``σ_z − ⟨σ_z⟩`` per basis index, shape (..., 2)."""
    sigma = _sigma_z(spec)
    pops = _normalized_populations(spec, psi)
    mean = pops[..., 0] - pops[..., 1]
    return sigma, sigma - mean[..., None]


def _projector_shift(spec: ModelSpec, psi: ComplexArray) -> RealArray:
    """``1[labels[n] = k] − ⟨P_k⟩``, shape (..., K, N)."""
    pops = _normalized_populations(spec, psi)
    return spec.projectors.membership.T - pops[..., :, None]


def _two_state_strat(spec: ModelSpec, psi: ComplexArray) -> tuple[ComplexArray, ComplexArray]:
    _, shift = _sigma_shift(spec, psi)
    mean = (_sigma_z(spec) - shift)[..., :1]
    drift = _hamiltonian_part(spec, psi) + spec.collapse_rate * mean * shift * psi
    diffusion = (math.sqrt(spec.channel_strength) * shift * psi)[..., None, :]
    return drift, diffusion


def _two_state_ito(spec: ModelSpec, psi: ComplexArray) -> tuple[ComplexArray, ComplexArray]:
    _, shift = _sigma_shift(spec, psi)
    rate = spec.collapse_rate
    drift = _hamiltonian_part(spec, psi) - (rate / 4) * shift**2 * psi
    diffusion = (math.sqrt(rate / 2) * shift * psi)[..., None, :]
    return drift, diffusion


def _n_state_suv(spec: ModelSpec, psi: ComplexArray) -> ComplexArray:
    """``Σ_k ⟨P_k⟩(P_k − ⟨P_k⟩)ψ``: the own-cell population minus the purity of the populations."""
    pops = _normalized_populations(spec, psi)
    own = pops[..., spec.projectors.labels]
    return (own - np.sum(pops**2, axis=-1, keepdims=True)) * psi


def _n_state_square(spec: ModelSpec, psi: ComplexArray) -> ComplexArray:
    """``Σ_k (P_k − ⟨P_k⟩)²ψ`` using ``P_k² = P_k``."""
    pops = _normalized_populations(spec, psi)
    own = pops[..., spec.projectors.labels]
    return (1 - 2 * own + np.sum(pops**2, axis=-1, keepdims=True)) * psi


def _n_state_diffusion(spec: ModelSpec, psi: ComplexArray, strength: float) -> ComplexArray:
    return math.sqrt(strength) * _projector_shift(spec, psi) * psi[..., None, :]


def _n_state_strat(spec: ModelSpec, psi: ComplexArray) -> tuple[ComplexArray, ComplexArray]:
    drift = _hamiltonian_part(spec, psi) + 2 * spec.collapse_rate * _n_state_suv(spec, psi)
    return drift, _n_state_diffusion(spec, psi, spec.channel_strength)


def _n_state_ito(spec: ModelSpec, psi: ComplexArray) -> tuple[ComplexArray, ComplexArray]:
    rate, strength = spec.collapse_rate, spec.channel_strength
    # with the FDR (κ = Γ) the first collapse term vanishes and this is the CSL form
    drift = (
        _hamiltonian_part(spec, psi)
        + 2 * (rate - strength) * _n_state_suv(spec, psi)
        - (strength / 2) * _n_state_square(spec, psi)
    )
    return drift, _n_state_diffusion(spec, psi, strength)


def correction_kernel(spec: ModelSpec, psi: ComplexArray) -> ComplexArray:
    """``Ĉψ = κ Σ_A (½(A − ⟨A⟩)² − (⟨A²⟩ − ⟨A⟩²))ψ`` over the variant's channel operators."""
    strength = spec.channel_strength
    if spec.variant.is_two_state:
        _, shift = _sigma_shift(spec, psi)
        mean = (_sigma_z(spec) - shift)[..., :1]
        return strength * (0.5 * shift**2 - (1 - mean**2)) * psi
    pops = _normalized_populations(spec, psi)
    variance = np.sum(pops - pops**2, axis=-1, keepdims=True)
    return strength * (0.5 * _n_state_square(spec, psi) - variance * psi)


def colored_kernel(spec: ModelSpec, psi: ComplexArray, xi: npt.ArrayLike) -> ComplexArray:
    """``(𝒩/ħ) Σ_k (P_k − ⟨P_k⟩)[2𝒥⟨P_k⟩ + Gξ^k]ψ − (i/ħ)Hψ`` with xi of shape (..., K)."""
    pops = _normalized_populations(spec, psi)
    coefficient = 2 * spec.script_j * pops + (spec.noise_g or 0.0) * np.asarray(xi)
    weighted = np.sum(pops * coefficient, axis=-1, keepdims=True)
    own = coefficient[..., spec.projectors.labels]
    return _hamiltonian_part(spec, psi) + (spec.n_size / spec.hbar) * (own - weighted) * psi


_KERNELS: Final[dict[Variant, Callable[[ModelSpec, ComplexArray], tuple[ComplexArray, ComplexArray]]]] = {
    Variant.TWO_STATE_STRAT: _two_state_strat,
    Variant.TWO_STATE_ITO: _two_state_ito,
    Variant.N_STATE_STRAT: _n_state_strat,
    Variant.N_STATE_ITO: _n_state_ito,
}


def terms_kernel(spec: ModelSpec, psi: ComplexArray) -> tuple[ComplexArray, ComplexArray]:
    """Drift (..., N) and diffusion (..., C, N) of a white-noise variant."""
    if spec.variant.is_colored:
        raise ModelError("the colored model has no diffusion channels; use colored_kernel")
    if spec.variant is Variant.TWO_STATE_ITO and not spec.fdr_enforced:
        raise FDRError("the two-state Itô form presupposes the FDR; call derive_fdr_params")
    return _KERNELS[spec.variant](spec, psi)


# ---------------------------------------------------------------------------
# single-state operations


def _expect(spec: ModelSpec, psi: StateVector, *variants: Variant) -> None:
    if spec.variant not in variants:
        raise ModelError(
            f"expected variant {', '.join(v.value for v in variants)}", variant=spec.variant.value
        )
    if psi.dim != spec.dim:
        raise ModelError("state and model dimensions differ", state=psi.dim, model=spec.dim)


def _pair(spec: ModelSpec, psi: StateVector) -> TermPair:
    drift, diffusion = terms_kernel(spec, psi.amplitudes)
    return TermPair(drift, diffusion, ito=spec.variant.is_ito)


def two_state_strat_terms(spec: ModelSpec, psi: StateVector) -> TermPair:
    _expect(spec, psi, Variant.TWO_STATE_STRAT)
    return _pair(spec, psi)


def two_state_ito_terms(spec: ModelSpec, psi: StateVector) -> TermPair:
    _expect(spec, psi, Variant.TWO_STATE_ITO)
    return _pair(spec, psi)


def n_state_strat_terms(spec: ModelSpec, psi: StateVector) -> TermPair:
    _expect(spec, psi, Variant.N_STATE_STRAT)
    return _pair(spec, psi)


def n_state_ito_terms(spec: ModelSpec, psi: StateVector) -> TermPair:
    _expect(spec, psi, Variant.N_STATE_ITO)
    return _pair(spec, psi)


def model_terms(spec: ModelSpec, psi: StateVector) -> TermPair:
    _expect(spec, psi, *_KERNELS)
    return _pair(spec, psi)


def stratonovich_correction(spec: ModelSpec, psi: StateVector) -> ComplexArray:
    if psi.dim != spec.dim:
        raise ModelError("state and model dimensions differ", state=psi.dim, model=spec.dim)
    return correction_kernel(spec, psi.amplitudes)


def colored_terms(spec: ModelSpec, psi: StateVector, xi: ColoredNoiseState) -> ComplexArray:
    _expect(spec, psi, Variant.COLORED_N_STATE)
    if xi.n_channels != spec.projectors.n_projectors:
        raise ModelError(
            "one colored-noise channel per projector expected",
            channels=xi.n_channels,
            projectors=spec.projectors.n_projectors,
        )
    return colored_kernel(spec, psi.amplitudes, xi.xi)


def norm_change_rate(spec: ModelSpec, psi: StateVector) -> float:
    """Mean Itô norm change per unit time, ``2Re⟨ψ|drift⟩ + Σ_k ‖b_k‖²``; zero under the dynamics."""
    if spec.variant.is_colored:
        raise ModelError("the colored model is an ODE; its norm change is 2Re⟨ψ|ψ'⟩")
    drift, diffusion = terms_kernel(spec, psi.amplitudes)
    if spec.variant.is_stratonovich:
        drift = drift + correction_kernel(spec, psi.amplitudes)
    return float(2 * np.vdot(psi.amplitudes, drift).real + np.sum(np.abs(diffusion) ** 2))


def energy_rate(spec: ModelSpec, rho: DensityMatrix) -> float:
    """``dE/dt = (𝒥𝒩/ħ)(Σ_k Tr[ρ P_k H P_k] − Tr[ρH])``."""
    if spec.hamiltonian is None:
        raise ModelError("energy_rate needs a Hamiltonian")
    if rho.dim != spec.dim:
        raise ModelError("density matrix and model dimensions differ", rho=rho.dim, model=spec.dim)
    h = spec.hamiltonian.entries
    # Σ_k P_k H P_k keeps the entries of H inside each cell
    dephased = np.where(spec.projectors.same_cell, h, 0)
    return spec.collapse_rate * float(np.real(np.sum(rho.entries.T * (dephased - h))))


def squared_amplitude_dynamics(spec: ModelSpec, z: npt.ArrayLike) -> tuple[RealArray, RealArray]:
    """Drift ``J_i`` and noise matrix ``G_ij`` of ``dz_i = J_i dt + G_ij ξ_j dt``.

    ``J_i = 4Γ z_i(z_i − Σ_j z_j²)`` and ``G_ij = 2G(𝒩/ħ) z_i(δ_ij − z_j)`` for the squared
    amplitudes ``z_i = |⟨i|ψ⟩|²`` of the colored model with rank-1 projectors and H = 0.
    """
    if not spec.projectors.is_rank_one:
        raise ModelError("squared-amplitude dynamics need rank-1 projectors")
    amplitudes = np.asarray(z, dtype=np.float64)
    drift = 4 * spec.collapse_rate * amplitudes * (amplitudes - np.sum(amplitudes**2))
    coupling = 2 * (spec.noise_g or 0.0) * spec.n_size / spec.hbar
    noise = coupling * amplitudes[:, None] * (np.eye(amplitudes.size) - amplitudes[None, :])
    return drift, noise
