"""Time stepping and the trajectory driver.

Itô variants step with Euler–Maruyama, Stratonovich variants with the Heun midpoint rule and
the colored model with classical RK4. `integrate_batch` advances many trajectories at once as
rows of a ``(B, N)`` array; each row reads its own per-channel streams, and every operation is
row-wise, so a trajectory's result does not depend on which rows it was batched with.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Final, Literal

import numpy as np

from collapse_sde.errors import IntegrationError, ModelError, TrajectoryError
from collapse_sde.hilbert import ComplexArray, IndexArray, RealArray, StateVector
from collapse_sde.models import (
    COLORED_DT_RATIO,
    ModelSpec,
    colored_kernel,
    terms_kernel,
)
from collapse_sde.noise import (
    INITIAL_DRAW_OFFSET,
    ColoredNoiseState,
    RandomStream,
    colored_update,
    stationary_sample,
)

if TYPE_CHECKING:
    from collections.abc import Sequence

log = logging.getLogger(__name__)

UNRESOLVED: Final = "unresolved"
#: outcome code of unresolved rows in batch arrays
UNRESOLVED_CODE: Final = -1
#: normals drawn per stream per refill
DRAW_BLOCK: Final = 256

Outcome = int | Literal["unresolved"]


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    t_max: float
    renormalize_each_step: bool = True
    collapse_epsilon: float = 1e-6
    record_stride: int = 1
    #: times at which populations and state moments are captured
    checkpoints: tuple[float, ...] = ()
    stop_at_collapse: bool = True

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise IntegrationError("dt must be positive", dt=self.dt)
        if not self.t_max > 0:
            raise IntegrationError("t_max must be positive", t_max=self.t_max)
        if not 0 < self.collapse_epsilon < 0.5:
            raise IntegrationError("collapse_epsilon must lie in (0, 0.5)", collapse_epsilon=self.collapse_epsilon)
        if self.record_stride < 1:
            raise IntegrationError("record_stride must be at least 1", record_stride=self.record_stride)
        checkpoints = tuple(sorted(float(t) for t in self.checkpoints))
        if checkpoints and (checkpoints[0] < 0 or checkpoints[-1] > self.t_max * (1 + 1e-12)):
            raise IntegrationError("checkpoints must lie in [0, t_max]", checkpoints=list(checkpoints))
        object.__setattr__(self, "checkpoints", checkpoints)

    @property
    def n_steps(self) -> int:
        ratio = self.t_max / self.dt
        nearest = round(ratio)
        return int(nearest) if abs(ratio - nearest) <= 1e-9 * ratio else math.ceil(ratio)

    @property
    def checkpoint_steps(self) -> tuple[int, ...]:
        """Step index of each checkpoint, rounded to the nearest step."""
        return tuple(min(round(t / self.dt), self.n_steps) for t in self.checkpoints)


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    times: RealArray
    populations: RealArray
    norms: RealArray
    final_outcome: Outcome
    collapse_time: float | None
    master_seed: int
    trajectory_index: int
    checkpoint_times: RealArray
    checkpoint_populations: RealArray
    final_state: ComplexArray

    @property
    def resolved(self) -> bool:
        return self.final_outcome != UNRESOLVED

    def sidecar(self) -> dict[str, object]:
        return {
            "final_outcome": self.final_outcome,
            "collapse_time": self.collapse_time,
            "master_seed": self.master_seed,
            "trajectory_index": self.trajectory_index,
            "n_records": int(self.times.size),
        }


@dataclass(frozen=True, eq=False)
class BatchRecord:
    """Time series of a batch: times (R,), populations (R, B, K), norms (R, B)."""

    times: RealArray
    populations: RealArray
    norms: RealArray


@dataclass(frozen=True, eq=False)
class BatchResult:
    trajectory_indices: IndexArray
    outcomes: IndexArray
    collapse_times: RealArray
    final_states: ComplexArray
    checkpoint_times: RealArray
    #: (B, n_checkpoints, K)
    checkpoint_populations: RealArray
    #: (n_checkpoints, 3, N, N) sums over rows of ψψ†, |ψ_i|²|ψ_j|² and (ψ_iψ_j*)²
    checkpoint_moments: ComplexArray
    record: BatchRecord | None = field(default=None)

    @property
    def size(self) -> int:
        return int(self.trajectory_indices.size)

    @classmethod
    def merge(cls, results: Sequence[BatchResult]) -> BatchResult:
        """Concatenate results in the given order; moment sums are added in that order."""
        if not results:
            raise IntegrationError("nothing to merge")
        moments = results[0].checkpoint_moments.copy()
        for result in results[1:]:
            moments += result.checkpoint_moments
        return cls(
            np.concatenate([r.trajectory_indices for r in results]),
            np.concatenate([r.outcomes for r in results]),
            np.concatenate([r.collapse_times for r in results]),
            np.concatenate([r.final_states for r in results]),
            results[0].checkpoint_times,
            np.concatenate([r.checkpoint_populations for r in results]),
            moments,
        )


# ---------------------------------------------------------------------------
# array updates on (..., N) states


def _renormalize(psi: ComplexArray) -> ComplexArray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return psi / np.sqrt(np.sum(np.abs(psi) ** 2, axis=-1, keepdims=True))


def _increment(spec: ModelSpec, at: ComplexArray, dt: float, dw: RealArray) -> ComplexArray:
    drift, diffusion = terms_kernel(spec, at)
    return drift * dt + np.sum(diffusion * dw[..., :, None], axis=-2)


def em_update(spec: ModelSpec, psi: ComplexArray, dt: float, dw: RealArray) -> ComplexArray:
    return psi + _increment(spec, psi, dt, dw)


def heun_update(spec: ModelSpec, psi: ComplexArray, dt: float, dw: RealArray) -> ComplexArray:
    """Euler predictor, then both terms re-evaluated at the mean of state and prediction."""
    predicted = psi + _increment(spec, psi, dt, dw)
    return psi + _increment(spec, (psi + predicted) / 2, dt, dw)


def rk4_update(spec: ModelSpec, psi: ComplexArray, dt: float, xi_mid: RealArray) -> ComplexArray:
    """One RK4 step of the colored-noise ODE with ξ frozen at its midpoint value."""
    k1 = colored_kernel(spec, psi, xi_mid)
    k2 = colored_kernel(spec, psi + (dt / 2) * k1, xi_mid)
    k3 = colored_kernel(spec, psi + (dt / 2) * k2, xi_mid)
    k4 = colored_kernel(spec, psi + dt * k3, xi_mid)
    return psi + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def check_colored_dt(spec: ModelSpec, dt: float) -> None:
    assert spec.tau is not None
    bound = COLORED_DT_RATIO * spec.tau
    if dt > bound * (1 + 1e-12):
        raise IntegrationError(f"colored runs need dt <= tau/10 (dt={dt}, tau={spec.tau})", dt=dt, bound=bound)


# ---------------------------------------------------------------------------
# single-step operations


def _check_increments(spec: ModelSpec, psi: StateVector, dt: float, increments: Sequence[float]) -> RealArray:
    if not dt > 0:
        raise IntegrationError("dt must be positive", dt=dt)
    if psi.dim != spec.dim:
        raise ModelError("state and model dimensions differ", state=psi.dim, model=spec.dim)
    dw = np.asarray(increments, dtype=np.float64)
    if dw.shape != (spec.n_channels,):
        raise IntegrationError(
            "one increment per channel expected", increments=dw.size, channels=spec.n_channels
        )
    return dw


def _finish(amplitudes: ComplexArray, renormalize: bool) -> StateVector:
    if not np.all(np.isfinite(amplitudes)):
        raise TrajectoryError("step produced a non-finite state")
    if renormalize:
        return StateVector(_renormalize(amplitudes))
    return StateVector(amplitudes, check_norm=False)


def em_step(
    spec: ModelSpec, psi: StateVector, dt: float, increments: Sequence[float], renormalize: bool = True
) -> StateVector:
    """``ψ' = ψ + a(ψ)dt + Σ_k b_k(ψ)dW_k`` for an Itô variant."""
    if not spec.variant.is_ito:
        raise IntegrationError("Euler–Maruyama needs an Itô variant", variant=spec.variant.value)
    dw = _check_increments(spec, psi, dt, increments)
    return _finish(em_update(spec, psi.amplitudes, dt, dw), renormalize)


def heun_step(
    spec: ModelSpec, psi: StateVector, dt: float, increments: Sequence[float], renormalize: bool = True
) -> StateVector:
    if not spec.variant.is_stratonovich:
        raise IntegrationError("the Heun midpoint rule needs a Stratonovich variant", variant=spec.variant.value)
    dw = _check_increments(spec, psi, dt, increments)
    return _finish(heun_update(spec, psi.amplitudes, dt, dw), renormalize)


def colored_step(
    spec: ModelSpec,
    psi: StateVector,
    xi: ColoredNoiseState,
    dt: float,
    streams: RandomStream | Sequence[RandomStream],
    renormalize: bool = True,
) -> tuple[StateVector, ColoredNoiseState]:
    """Advance ξ over ``dt`` first, then ψ by one RK4 step with ``ξ = (ξ_old + ξ_new)/2``."""
    if not spec.variant.is_colored:
        raise IntegrationError("colored_step needs the colored model", variant=spec.variant.value)
    if not dt > 0:
        raise IntegrationError("dt must be positive", dt=dt)
    check_colored_dt(spec, dt)
    if xi.kind is not spec.noise_kind or xi.n_channels != spec.projectors.n_projectors:
        raise ModelError(
            "noise state does not match the model",
            kind=xi.kind.value,
            channels=xi.n_channels,
            projectors=spec.projectors.n_projectors,
        )
    if isinstance(streams, RandomStream):
        eta = streams.normal(xi.n_channels)
    else:
        if len(streams) != xi.n_channels:
            raise IntegrationError("one stream per channel expected", streams=len(streams))
        eta = np.array([stream.normal() for stream in streams])
    advanced = ColoredNoiseState(xi.kind, colored_update(xi.kind, xi.xi, dt, xi.tau, eta), xi.tau)
    midpoint = (xi.xi + advanced.xi) / 2
    return _finish(rk4_update(spec, psi.amplitudes, dt, midpoint), renormalize), advanced


# ---------------------------------------------------------------------------
# batch engine


class _NormalBlocks:
    """Per-row, per-channel standard normals, one (B, C) slice per step."""

    def __init__(self, streams: list[list[RandomStream]]) -> None:
        self._streams = streams
        self._buffer = np.empty((0, 0, 0))
        self._cursor = 0

    def __call__(self) -> RealArray:
        if self._cursor == self._buffer.shape[-1]:
            self._buffer = np.array([[stream.normal(DRAW_BLOCK) for stream in row] for row in self._streams])
            self._cursor = 0
        values = self._buffer[:, :, self._cursor]
        self._cursor += 1
        return values


def _channel_streams(
    master_seed: int, indices: Sequence[int], n_channels: int, offset: int = 0
) -> list[list[RandomStream]]:
    return [
        [RandomStream.for_channel(master_seed, int(i), c + offset) for c in range(n_channels)] for i in indices
    ]


def _initial_noise(spec: ModelSpec, master_seed: int, indices: Sequence[int]) -> RealArray:
    streams = _channel_streams(master_seed, indices, spec.projectors.n_projectors, INITIAL_DRAW_OFFSET)
    return np.array([[stationary_sample(spec.noise_kind, stream) for stream in row] for row in streams])


def _moments(psi: ComplexArray) -> ComplexArray:
    weights = np.abs(psi) ** 2
    squares = psi**2
    return np.stack(
        [
            psi.T @ psi.conj(),
            (weights.T @ weights).astype(np.complex128),
            squares.T @ squares.conj(),
        ]
    )


def integrate_batch(
    spec: ModelSpec,
    psi0: StateVector,
    config: IntegratorConfig,
    trajectory_indices: Sequence[int],
    master_seed: int,
    record: bool = False,
) -> BatchResult:
    """Integrate one trajectory per index from the common initial state ``psi0``."""
    if psi0.dim != spec.dim:
        raise ModelError("state and model dimensions differ", state=psi0.dim, model=spec.dim)
    if not psi0.is_normalized:
        raise IntegrationError("initial state must be normalized", norm=psi0.norm)
    indices = np.asarray(trajectory_indices, dtype=np.intp)
    if indices.ndim != 1 or indices.size == 0:
        raise IntegrationError("at least one trajectory index is needed")
    if spec.variant.is_colored:
        check_colored_dt(spec, config.dt)
        draw = _NormalBlocks(_channel_streams(master_seed, indices, spec.projectors.n_projectors))
        xi = _initial_noise(spec, master_seed, indices)
    else:
        # fail before any work for specs that cannot produce terms
        terms_kernel(spec, psi0.amplitudes)
        draw = _NormalBlocks(_channel_streams(master_seed, indices, spec.n_channels))
        xi = np.empty((indices.size, 0))
    update = em_update if spec.variant.is_ito else heun_update

    n_rows, dt = indices.size, config.dt
    sqrt_dt = math.sqrt(dt)
    threshold = 1 - config.collapse_epsilon
    psi = np.tile(psi0.amplitudes, (n_rows, 1))
    outcomes = np.full(n_rows, UNRESOLVED_CODE, dtype=np.intp)
    collapse_times = np.full(n_rows, np.nan)
    active = np.ones(n_rows, dtype=bool)

    cp_steps = config.checkpoint_steps
    n_cp = len(cp_steps)
    cp_populations = np.empty((n_rows, n_cp, spec.projectors.n_projectors))
    cp_moments = np.zeros((n_cp, 3, spec.dim, spec.dim), dtype=np.complex128)
    cp_next = 0
    rec_times: list[float] = []
    rec_populations: list[RealArray] = []
    rec_norms: list[RealArray] = []

    def observe(step: int) -> None:
        nonlocal cp_next
        populations = spec.projectors.populations(psi)
        # stopped rows are resolved already, so only moving rows can cross here
        reached = (populations.max(axis=-1) >= threshold) & (outcomes == UNRESOLVED_CODE)
        outcomes[reached] = np.argmax(populations[reached], axis=-1)
        collapse_times[reached] = step * dt
        if config.stop_at_collapse:
            active[reached] = False
        while cp_next < n_cp and cp_steps[cp_next] == step:
            cp_populations[:, cp_next] = populations
            cp_moments[cp_next] = _moments(psi)
            cp_next += 1
        final = step == config.n_steps or not active.any()
        if record and (step % config.record_stride == 0 or final):
            rec_times.append(step * dt)
            rec_populations.append(populations)
            rec_norms.append(np.sqrt(np.sum(np.abs(psi) ** 2, axis=-1)))

    observe(0)
    steps_taken = 0
    for step in range(1, config.n_steps + 1):
        if not active.any():
            break
        steps_taken = step
        eta = draw()
        rows = np.flatnonzero(active)
        if spec.variant.is_colored:
            assert spec.tau is not None
            xi_new = colored_update(spec.noise_kind, xi[rows], dt, spec.tau, eta[rows])
            psi[rows] = rk4_update(spec, psi[rows], dt, (xi[rows] + xi_new) / 2)
            xi[rows] = xi_new
        else:
            psi[rows] = update(spec, psi[rows], dt, eta[rows] * sqrt_dt)
        if config.renormalize_each_step:
            psi[rows] = _renormalize(psi[rows])
        finite = np.all(np.isfinite(psi[rows]), axis=-1)
        if not finite.all():
            bad = int(indices[rows[np.argmin(finite)]])
            raise TrajectoryError(
                f"non-finite state at step {step} of trajectory {bad}",
                step=step,
                trajectory_index=bad,
                master_seed=master_seed,
            )
        observe(step)

    # stopped rows keep their last state at later checkpoints
    if cp_next < n_cp:
        populations = spec.projectors.populations(psi)
        for slot in range(cp_next, n_cp):
            cp_populations[:, slot] = populations
            cp_moments[slot] = _moments(psi)
    log.debug(
        "batch of %d trajectories stopped after %d steps, %d unresolved",
        n_rows,
        steps_taken,
        int(np.sum(outcomes == UNRESOLVED_CODE)),
    )
    batch_record = None
    if record:
        batch_record = BatchRecord(np.array(rec_times), np.array(rec_populations), np.array(rec_norms))
    return BatchResult(
        indices,
        outcomes,
        collapse_times,
        psi,
        np.array([s * dt for s in cp_steps]),
        cp_populations,
        cp_moments,
        batch_record,
    )


def run_trajectory(
    spec: ModelSpec,
    psi0: StateVector,
    config: IntegratorConfig,
    trajectory_index: int,
    master_seed: int,
) -> TrajectoryRecord:
    """Integrate one trajectory until ``max_k ⟨P_k⟩ ≥ 1 − ε`` or ``t_max``.

    The outcome is the argmax of the populations at the first crossing (lowest index on ties),
    or `UNRESOLVED` when the horizon is reached first.
    """
    batch = integrate_batch(spec, psi0, config, [trajectory_index], master_seed, record=True)
    assert batch.record is not None
    outcome = int(batch.outcomes[0])
    collapse_time = float(batch.collapse_times[0])
    return TrajectoryRecord(
        times=batch.record.times,
        populations=batch.record.populations[:, 0],
        norms=batch.record.norms[:, 0],
        final_outcome=UNRESOLVED if outcome == UNRESOLVED_CODE else outcome,
        collapse_time=None if math.isnan(collapse_time) else collapse_time,
        master_seed=master_seed,
        trajectory_index=trajectory_index,
        checkpoint_times=batch.checkpoint_times,
        checkpoint_populations=batch.checkpoint_populations[0],
        final_state=batch.final_states[0],
    )


def outcome_label(code: int) -> Outcome:
    return UNRESOLVED if code == UNRESOLVED_CODE else int(code)
