"""Dense state-vector and operator algebra on small Hilbert spaces.

Every value here is immutable after construction: arrays are copied and flagged read-only, so
states and operators can be shared between trajectory workers freely.
"""

from __future__ import annotations

import logging
from dataclasses import InitVar, dataclass
from typing import TYPE_CHECKING, Final

import numpy as np
import numpy.typing as npt

from collapse_sde.errors import HilbertError

if TYPE_CHECKING:
    from collections.abc import Sequence

log = logging.getLogger(__name__)

NORM_TOL: Final = 1e-10
HERMITIAN_TOL: Final = 1e-12
TRACE_TOL: Final = 1e-10
EIGENVALUE_TOL: Final = 1e-10
PROJECTOR_TOL: Final = 1e-12
IMAGINARY_TOL: Final = 1e-10
#: below this deviation `normalize` hands the input back untouched
IDEMPOTENT_NORM_TOL: Final = 1e-15

ComplexArray = npt.NDArray[np.complex128]
RealArray = npt.NDArray[np.float64]
IndexArray = npt.NDArray[np.intp]


def _readonly(values: npt.ArrayLike, dtype: type = np.complex128) -> npt.NDArray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class StateVector:
    """Wave function over the canonical basis.

    Construction checks the unit norm unless ``check_norm=False``; integrators use the
    unchecked form for the raw state of a step taken without renormalization.
    """

    amplitudes: ComplexArray
    check_norm: InitVar[bool] = True

    def __post_init__(self, check_norm: bool) -> None:
        amplitudes = _readonly(self.amplitudes)
        if amplitudes.ndim != 1 or amplitudes.size < 2:
            raise HilbertError("state vectors need at least two amplitudes", shape=amplitudes.shape)
        if not np.all(np.isfinite(amplitudes)):
            raise HilbertError("state vector has non-finite amplitudes")
        object.__setattr__(self, "amplitudes", amplitudes)
        if check_norm and not self.is_normalized:
            raise HilbertError("state vector is not normalized", norm=self.norm)

    @classmethod
    def from_populations(
        cls, populations: Sequence[float], phases: Sequence[float] | None = None
    ) -> StateVector:
        """Amplitudes ``√p_k·e^{iθ_k}``; the populations are rescaled to sum to one."""
        probs = np.asarray(populations, dtype=np.float64)
        if np.any(probs < 0) or probs.sum() <= 0:
            raise HilbertError("populations must be nonnegative with a positive sum")
        probs = probs / probs.sum()
        angles = np.zeros_like(probs) if phases is None else np.asarray(phases, dtype=np.float64)
        if angles.shape != probs.shape:
            raise HilbertError("one phase per population expected", populations=probs.size, phases=angles.size)
        return cls(np.sqrt(probs) * np.exp(1j * angles))

    @property
    def dim(self) -> int:
        return int(self.amplitudes.size)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    @property
    def is_normalized(self) -> bool:
        return abs(self.norm - 1.0) <= NORM_TOL

    def __len__(self) -> int:
        return self.dim

    def __repr__(self) -> str:
        return f"StateVector({np.array2string(self.amplitudes, precision=6)})"


@dataclass(frozen=True, eq=False)
class HermitianOperator:
    entries: ComplexArray

    def __post_init__(self) -> None:
        entries = _readonly(self.entries)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise HilbertError("operator must be a square matrix", shape=entries.shape)
        deviation = float(np.max(np.abs(entries - entries.conj().T), initial=0.0))
        if deviation > HERMITIAN_TOL:
            raise HilbertError("operator is not Hermitian", deviation=deviation)
        object.__setattr__(self, "entries", entries)

    @classmethod
    def diagonal(cls, values: Sequence[float]) -> HermitianOperator:
        return cls(np.diag(np.asarray(values, dtype=np.float64)))

    @property
    def dim(self) -> int:
        return int(self.entries.shape[0])

    @property
    def is_zero(self) -> bool:
        return not np.any(self.entries)

    def commutes_with(self, projectors: ProjectorSet, tol: float = HERMITIAN_TOL) -> bool:
        # [H, P_k] = 0 for every k iff H has no entries between different cells
        return bool(np.max(np.abs(self.entries[~projectors.same_cell]), initial=0.0) <= tol)


@dataclass(frozen=True, eq=False)
class ProjectorSet:
    """Mutually orthogonal projectors, diagonal in the canonical basis.

    Stored as one label per basis index: ``P_k = Σ_{n: labels[n] = k} |n⟩⟨n|``. Idempotence,
    orthogonality and completeness then hold by construction, and ``P_k ψ`` is a masked copy.
    """

    labels: IndexArray

    def __post_init__(self) -> None:
        labels = _readonly(self.labels, dtype=np.intp)
        if labels.ndim != 1 or labels.size < 2:
            raise HilbertError("projector labels must cover at least two basis states")
        if labels.min() < 0 or np.any(np.bincount(labels) == 0):
            raise HilbertError(
                "projector labels must be 0..K-1 with every projector non-empty", labels=labels.tolist()
            )
        if int(labels.max()) < 1:
            raise HilbertError("a collapse basis needs at least two projectors")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> ProjectorSet:
        return cls(np.asarray(labels, dtype=np.intp))

    @classmethod
    def from_matrices(cls, matrices: Sequence[npt.ArrayLike]) -> ProjectorSet:
        """Recover the index sets from dense projector matrices, checking the algebra."""
        stack = np.asarray(matrices, dtype=np.complex128)
        if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
            raise HilbertError("expected a stack of square matrices", shape=stack.shape)
        n_projectors, n_dim, _ = stack.shape
        diagonals = np.einsum("kii->ki", stack)
        off_diagonal = stack - np.einsum("ki,ij->kij", diagonals, np.eye(n_dim))
        if np.max(np.abs(off_diagonal), initial=0.0) > PROJECTOR_TOL:
            raise HilbertError("only projectors diagonal in the canonical basis are supported")
        rounded = np.round(diagonals.real)
        if np.max(np.abs(diagonals - rounded), initial=0.0) > PROJECTOR_TOL or np.any(
            (rounded != 0) & (rounded != 1)
        ):
            raise HilbertError("projector diagonals must be 0 or 1 (P_k² = P_k)")
        coverage = rounded.sum(axis=0)
        if np.any(coverage > 1):
            raise HilbertError("projectors overlap (P_j P_k ≠ 0)")
        if np.any(coverage < 1):
            raise HilbertError("projectors are incomplete (Σ_k P_k ≠ 1)")
        if n_projectors and np.any(rounded.sum(axis=1) == 0):
            raise HilbertError("zero projector in the set")
        return cls(np.argmax(rounded, axis=0).astype(np.intp))

    @property
    def dim(self) -> int:
        return int(self.labels.size)

    @property
    def n_projectors(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def membership(self) -> RealArray:
        """(N, K) indicator matrix; ``populations = |ψ|² @ membership``."""
        indicator = np.zeros((self.dim, self.n_projectors))
        indicator[np.arange(self.dim), self.labels] = 1.0
        return indicator

    @property
    def same_cell(self) -> npt.NDArray[np.bool_]:
        """(N, N) mask of index pairs inside one projector; ``Σ_k P_k ρ P_k = ρ ∘ mask``."""
        return self.labels[:, None] == self.labels[None, :]

    @property
    def is_rank_one(self) -> bool:
        return self.n_projectors == self.dim

    def matrices(self) -> ComplexArray:
        return np.einsum("nk,nm->knm", self.membership, np.eye(self.dim)).astype(np.complex128)

    def apply(self, k: int, psi: StateVector) -> ComplexArray:
        return np.where(self.labels == k, psi.amplitudes, 0)

    def populations(self, amplitudes: npt.ArrayLike) -> RealArray:
        """⟨P_k⟩ for states of shape (..., N), normalized by ⟨ψ|ψ⟩."""
        weights = np.abs(np.asarray(amplitudes)) ** 2
        # elementwise sum rather than matmul: rows stay bitwise independent of the batch
        totals = np.sum(weights[..., :, None] * self.membership, axis=-2)
        return totals / weights.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    entries: ComplexArray

    def __post_init__(self) -> None:
        entries = _readonly(self.entries)
        problems = density_violations(entries)
        if problems:
            raise HilbertError("invalid density matrix: " + "; ".join(problems))
        object.__setattr__(self, "entries", entries)

    @classmethod
    def maximally_mixed(cls, n_dim: int) -> DensityMatrix:
        return cls(np.eye(n_dim) / n_dim)

    @property
    def dim(self) -> int:
        return int(self.entries.shape[0])


def density_violations(
    entries: npt.NDArray[np.complex128],
    hermitian_tol: float = HERMITIAN_TOL,
    trace_tol: float = TRACE_TOL,
    eigenvalue_tol: float = EIGENVALUE_TOL,
) -> list[str]:
    """Density-matrix invariants that ``entries`` breaks; empty when valid."""
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        return [f"not square: shape {entries.shape}"]
    if not np.all(np.isfinite(entries)):
        return ["non-finite entries"]
    problems = []
    asymmetry = float(np.max(np.abs(entries - entries.conj().T)))
    if asymmetry > hermitian_tol:
        problems.append(f"Hermiticity off by {asymmetry:.3g}")
    trace = complex(np.trace(entries))
    if abs(trace - 1) > trace_tol:
        problems.append(f"trace {trace:.12g}")
    smallest = float(np.linalg.eigvalsh((entries + entries.conj().T) / 2)[0])
    if smallest < -eigenvalue_tol:
        problems.append(f"eigenvalue {smallest:.3g}")
    return problems


def expectation(op: HermitianOperator, psi: StateVector) -> float:
    if op.dim != psi.dim:
        raise HilbertError("operator and state dimensions differ", operator=op.dim, state=psi.dim)
    if not psi.is_normalized:
        raise HilbertError("expectation needs a normalized state", norm=psi.norm)
    value = complex(np.vdot(psi.amplitudes, op.entries @ psi.amplitudes))
    if abs(value.imag) > IMAGINARY_TOL:
        raise HilbertError("expectation has an imaginary part", imag=value.imag)
    return value.real


def build_order_parameter(n_size: float) -> HermitianOperator:
    """Extensive two-state order parameter ``Ŝ_z = 𝒩 σ_z``."""
    if not n_size > 0:
        raise HilbertError("system size must be positive", n_size=n_size)
    return HermitianOperator.diagonal([n_size, -n_size])


def canonical_projectors(n_dim: int) -> ProjectorSet:
    if n_dim < 2:
        raise HilbertError("the canonical basis needs n_dim >= 2", n_dim=n_dim)
    return ProjectorSet(np.arange(n_dim, dtype=np.intp))


def position_grid_projectors(n_points: int, n_cells: int) -> ProjectorSet:
    """Contiguous cells of a 1-D position grid.

    The N-state model on such a grid is the discretized continuum model: each cell projector
    sums the grid points it covers.
    """
    if not 2 <= n_cells <= n_points:
        raise HilbertError("need 2 <= n_cells <= n_points", n_points=n_points, n_cells=n_cells)
    return ProjectorSet((np.arange(n_points) * n_cells) // n_points)


def normalize(psi: StateVector | npt.ArrayLike) -> StateVector:
    if isinstance(psi, StateVector):
        amplitudes = psi.amplitudes
        norm = psi.norm
    else:
        amplitudes = np.asarray(psi, dtype=np.complex128)
        norm = float(np.linalg.norm(amplitudes))
    if norm == 0:
        raise HilbertError("cannot normalize the zero vector")
    if isinstance(psi, StateVector) and abs(norm - 1.0) < IDEMPOTENT_NORM_TOL:
        return psi
    return StateVector(amplitudes / norm)


def pure_projector(psi: StateVector) -> DensityMatrix:
    if not psi.is_normalized:
        raise HilbertError("pure projector needs a normalized state", norm=psi.norm)
    return DensityMatrix(np.outer(psi.amplitudes, psi.amplitudes.conj()))


def basis_state(n_dim: int, k: int) -> StateVector:
    amplitudes = np.zeros(n_dim, dtype=np.complex128)
    amplitudes[k] = 1.0
    return StateVector(amplitudes)


def random_state(n_dim: int, rng: np.random.Generator) -> StateVector:
    """Unitarily invariant random state (normalized complex Gaussian vector)."""
    raw = rng.standard_normal(n_dim) + 1j * rng.standard_normal(n_dim)
    return normalize(raw)


def squared_amplitudes(psi: StateVector) -> RealArray:
    return np.abs(psi.amplitudes) ** 2


def purity(rho: DensityMatrix | ComplexArray) -> float:
    entries = rho.entries if isinstance(rho, DensityMatrix) else rho
    return float(np.real(np.einsum("ij,ji->", entries, entries)))
