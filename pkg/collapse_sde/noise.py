"""Seeded random streams, Wiener increments and the two colored-noise processes.

Ornstein–Uhlenbeck noise is advanced with its exact Gaussian transition; spherical Brownian
motion (the cosine-latitude of Brownian motion on a sphere) with Euler–Maruyama and clamping.
Both carry their analytic statistics, which the test suite and ``noise-validate`` use as oracles.
"""

from __future__ import annotations

import enum
import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Final

import numpy as np
import numpy.typing as npt
from scipy import signal

from collapse_sde.errors import NoiseError

log = logging.getLogger(__name__)

UINT64_MASK: Final = (1 << 64) - 1
#: channel offset of the streams that draw initial colored-noise values
INITIAL_DRAW_OFFSET: Final = 1 << 32
#: Euler–Maruyama stability guard for spherical Brownian motion: dt <= tau * SBM_MAX_STEP_RATIO
SBM_MAX_STEP_RATIO: Final = 0.1
#: normals drawn per call when a whole path is generated from one stream
PATH_BLOCK: Final = 4096

RealArray = npt.NDArray[np.float64]


def mix64(value: int) -> int:
    """splitmix64 finalizer, a bijective 64-bit mix."""
    z = (value + 0x9E3779B97F4A7C15) & UINT64_MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & UINT64_MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & UINT64_MASK
    return z ^ (z >> 31)


def derive_stream_index(trajectory_index: int, channel_index: int) -> int:
    return mix64(mix64(trajectory_index & UINT64_MASK) ^ (channel_index & UINT64_MASK))


@dataclass
class RandomStream:
    """Counter-based normal/uniform stream keyed by ``(master_seed, stream_index)``.

    Philox is keyed with ``master_seed·2⁶⁴ + stream_index`` and starts at counter zero, so a
    stream is reproduced exactly by its two integers no matter which worker owns it. Streams are
    stateful and must not be shared between workers.
    """

    master_seed: int
    stream_index: int
    _generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        for name in ("master_seed", "stream_index"):
            value = getattr(self, name)
            if not 0 <= value <= UINT64_MASK:
                raise NoiseError(f"{name} must be an unsigned 64-bit integer", **{name: value})
        key = (self.master_seed << 64) | self.stream_index
        self._generator = np.random.Generator(np.random.Philox(key=key))

    @classmethod
    def for_channel(cls, master_seed: int, trajectory_index: int, channel_index: int) -> RandomStream:
        return cls(master_seed, derive_stream_index(trajectory_index, channel_index))

    def normal(self, size: int | tuple[int, ...] | None = None) -> RealArray:
        return self._generator.standard_normal(size)

    def uniform(self, low: float, high: float, size: int | tuple[int, ...] | None = None) -> RealArray:
        return self._generator.uniform(low, high, size)


class NoiseKind(enum.Enum):
    OU = "OU"
    SBM = "SBM"

    @property
    def stationary_second_moment(self) -> float:
        """E∞[ξ²]: 1 for the standard normal law, 1/3 for the uniform law on [−1, 1]."""
        return 1.0 if self is NoiseKind.OU else 1.0 / 3.0

    def autocovariance(self, lag: npt.ArrayLike, tau: float) -> RealArray:
        return self.stationary_second_moment * np.exp(-np.abs(np.asarray(lag, dtype=float)) / tau)

    def conditional_mean(self, xi0: npt.ArrayLike, t: float, tau: float) -> RealArray:
        return np.asarray(xi0, dtype=float) * math.exp(-t / tau)

    def stationary_density(self, xi: npt.ArrayLike) -> RealArray:
        x = np.asarray(xi, dtype=float)
        if self is NoiseKind.OU:
            return np.exp(-(x**2) / 2) / math.sqrt(2 * math.pi)
        return np.where(np.abs(x) <= 1, 0.5, 0.0)


@dataclass(frozen=True, eq=False)
class ColoredNoiseState:
    kind: NoiseKind
    xi: RealArray
    tau: float

    def __post_init__(self) -> None:
        xi = np.array(self.xi, dtype=np.float64, ndmin=1, copy=True)
        xi.setflags(write=False)
        if not self.tau > 0:
            raise NoiseError("correlation time must be positive", tau=self.tau)
        if self.kind is NoiseKind.SBM and np.any(np.abs(xi) > 1):
            raise NoiseError("spherical Brownian noise lives on [-1, 1]", xi=xi.tolist())
        object.__setattr__(self, "xi", xi)

    @property
    def n_channels(self) -> int:
        return int(self.xi.size)


def _check_dt(dt: float) -> None:
    if not dt > 0:
        raise NoiseError("time step must be positive", dt=dt)


def check_sbm_step(dt: float, tau: float) -> None:
    if dt > tau * SBM_MAX_STEP_RATIO * (1 + 1e-12):
        raise NoiseError(
            f"spherical Brownian step needs dt <= tau/10 (dt={dt}, tau={tau})",
            dt=dt,
            tau=tau,
            bound=tau * SBM_MAX_STEP_RATIO,
        )


def wiener_increment(dt: float, stream: RandomStream) -> float:
    _check_dt(dt)
    return float(stream.normal()) * math.sqrt(dt)


def wiener_increments(dt: float, stream: RandomStream, size: int | tuple[int, ...]) -> RealArray:
    _check_dt(dt)
    return stream.normal(size) * math.sqrt(dt)


def _channel_normals(streams: RandomStream | Sequence[RandomStream], n_channels: int) -> RealArray:
    if isinstance(streams, RandomStream):
        return streams.normal(n_channels)
    if len(streams) != n_channels:
        raise NoiseError("one stream per channel expected", streams=len(streams), channels=n_channels)
    return np.array([stream.normal() for stream in streams])


def ou_update(xi: RealArray, dt: float, tau: float, eta: RealArray) -> RealArray:
    """Exact Ornstein–Uhlenbeck transition ``ξ·e^{−dt/τ} + √(1 − e^{−2dt/τ})·η``."""
    decay = math.exp(-dt / tau)
    return xi * decay + math.sqrt(-math.expm1(-2 * dt / tau)) * eta


def sbm_update(xi: RealArray, dt: float, tau: float, eta: RealArray) -> RealArray:
    """Euler–Maruyama step of ``dξ = −ξ dt/τ + √((1 − ξ²)/τ) dW`` clamped to [−1, 1]."""
    spread = np.sqrt(np.clip(1 - xi * xi, 0.0, None) * (dt / tau))
    return np.clip(xi - xi * (dt / tau) + spread * eta, -1.0, 1.0)


def ou_step(
    state: ColoredNoiseState, dt: float, stream: RandomStream | Sequence[RandomStream]
) -> ColoredNoiseState:
    if state.kind is not NoiseKind.OU:
        raise NoiseError("ou_step needs Ornstein–Uhlenbeck noise", kind=state.kind.value)
    _check_dt(dt)
    eta = _channel_normals(stream, state.n_channels)
    return ColoredNoiseState(state.kind, ou_update(state.xi, dt, state.tau, eta), state.tau)


def sbm_step(
    state: ColoredNoiseState, dt: float, stream: RandomStream | Sequence[RandomStream]
) -> ColoredNoiseState:
    if state.kind is not NoiseKind.SBM:
        raise NoiseError("sbm_step needs spherical Brownian noise", kind=state.kind.value)
    _check_dt(dt)
    check_sbm_step(dt, state.tau)
    eta = _channel_normals(stream, state.n_channels)
    return ColoredNoiseState(state.kind, sbm_update(state.xi, dt, state.tau, eta), state.tau)


def colored_update(kind: NoiseKind, xi: RealArray, dt: float, tau: float, eta: RealArray) -> RealArray:
    if kind is NoiseKind.OU:
        return ou_update(xi, dt, tau, eta)
    return sbm_update(xi, dt, tau, eta)


def stationary_sample(
    kind: NoiseKind, stream: RandomStream, size: int | tuple[int, ...] | None = None
) -> RealArray | float:
    values = stream.normal(size) if kind is NoiseKind.OU else stream.uniform(-1.0, 1.0, size)
    return float(values) if size is None else values


def ou_path(xi0: float, dt: float, tau: float, n_steps: int, stream: RandomStream) -> RealArray:
    """Exact Ornstein–Uhlenbeck path of ``n_steps`` steps, ``xi0`` included as the first value."""
    _check_dt(dt)
    decay = math.exp(-dt / tau)
    eta = stream.normal(n_steps)
    # y[n] = decay * y[n-1] + sqrt(1 - decay²) * eta[n]
    path, _ = signal.lfilter(
        [math.sqrt(-math.expm1(-2 * dt / tau))], [1.0, -decay], eta, zi=[decay * xi0]
    )
    return np.concatenate([[xi0], path])


def _sbm_states(
    xi0: npt.ArrayLike, dt: float, tau: float, n_steps: int, stream: RandomStream
) -> Iterator[RealArray]:
    _check_dt(dt)
    check_sbm_step(dt, tau)
    xi = np.array(xi0, dtype=np.float64, ndmin=1)
    if np.any(np.abs(xi) > 1):
        raise NoiseError("initial values must lie in [-1, 1]")
    rows_per_draw = max(1, min(PATH_BLOCK, PATH_BLOCK * 256 // xi.size))
    for start in range(0, n_steps, rows_per_draw):
        eta = stream.normal((min(rows_per_draw, n_steps - start), xi.size))
        for row in eta:
            xi = sbm_update(xi, dt, tau, row)
            yield xi


def sbm_paths(
    xi0: npt.ArrayLike, dt: float, tau: float, n_steps: int, stream: RandomStream
) -> RealArray:
    """Independent spherical Brownian chains, shape ``(n_steps + 1, n_chains)``."""
    start = np.array(xi0, dtype=np.float64, ndmin=1)
    paths = np.empty((n_steps + 1, start.size))
    paths[0] = start
    for step, xi in enumerate(_sbm_states(start, dt, tau, n_steps, stream), start=1):
        paths[step] = xi
    return paths


def sbm_evolve(
    xi0: npt.ArrayLike, dt: float, tau: float, n_steps: int, stream: RandomStream
) -> RealArray:
    """Final values of independent chains after ``n_steps``; the path is not kept."""
    xi = np.array(xi0, dtype=np.float64, ndmin=1)
    for xi in _sbm_states(xi0, dt, tau, n_steps, stream):  # noqa: B007
        pass
    return xi


def _check_support(**values: npt.ArrayLike) -> None:
    for name, value in values.items():
        if np.any(np.abs(np.asarray(value, dtype=np.float64)) > 1):
            raise NoiseError(
                f"spherical Brownian {name} must lie in [-1, 1]", **{name: np.asarray(value).tolist()}
            )


def legendre_polynomials(x: npt.ArrayLike, n_max: int) -> RealArray:
    """``P_0 … P_{n_max}`` at ``x`` by the Bonnet recurrence, shape ``(n_max + 1, *x.shape)``.

    ``(n + 1) P_{n+1} = (2n + 1) x P_n − n P_{n−1}``
    """
    if n_max < 0:
        raise NoiseError("n_max must be nonnegative", n_max=n_max)
    points = np.asarray(x, dtype=np.float64)
    values = np.empty((n_max + 1, *points.shape))
    values[0] = 1.0
    if n_max >= 1:
        values[1] = points
    for n in range(1, n_max):
        values[n + 1] = ((2 * n + 1) * points * values[n] - n * values[n - 1]) / (n + 1)
    return values


def _series_weights(xi0: float, dt: float, tau: float, n_max: int, factorial_weight: bool) -> RealArray:
    n = np.arange(n_max + 1)
    weights = (2 * n + 1) / 2 * np.exp(-n * (n + 1) * dt / (2 * tau))
    if factorial_weight:
        weights = weights * np.array([float(math.factorial(k)) ** 2 for k in n])
    return weights * legendre_polynomials(xi0, n_max)


def sbm_transition_density(
    xi: npt.ArrayLike,
    xi0: float,
    dt: float,
    tau: float,
    n_max: int,
    factorial_weight: bool = False,
) -> RealArray | float:
    """Truncated Legendre series of the spherical Brownian transition density.

    ``ρ(ξ, dt | ξ₀) = ½ Σ_n (2n + 1) P_n(ξ) P_n(ξ₀) exp(−n(n + 1) dt / 2τ)``

    ``factorial_weight=True`` multiplies each term by ``(n!)²``. That variant agrees for
    n ≤ 1 but breaks the Chapman–Kolmogorov property and the Monte Carlo histogram.
    """
    if not tau > 0:
        raise NoiseError("correlation time must be positive", tau=tau)
    _check_support(xi=xi, xi0=xi0)
    weights = _series_weights(xi0, dt, tau, n_max, factorial_weight)
    result = np.tensordot(weights, legendre_polynomials(xi, n_max), axes=(0, 0))
    return float(result) if np.ndim(xi) == 0 else result


def sbm_bin_probabilities(
    edges: npt.ArrayLike,
    xi0: float,
    dt: float,
    tau: float,
    n_max: int,
    factorial_weight: bool = False,
) -> RealArray:
    """Series probability of each bin, integrated term by term.

    Uses ``∫ P_n = (P_{n+1} − P_{n−1}) / (2n + 1)`` for n ≥ 1.
    """
    bounds = np.asarray(edges, dtype=np.float64)
    _check_support(edges=bounds, xi0=xi0)
    weights = _series_weights(xi0, dt, tau, n_max, factorial_weight)
    polys = legendre_polynomials(bounds, n_max + 1)
    antiderivative = np.empty((n_max + 1, bounds.size))
    antiderivative[0] = bounds
    for n in range(1, n_max + 1):
        antiderivative[n] = (polys[n + 1] - polys[n - 1]) / (2 * n + 1)
    cumulative = np.tensordot(weights, antiderivative, axes=(0, 0))
    return np.diff(cumulative)
