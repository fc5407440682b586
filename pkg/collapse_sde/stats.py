"""Ensembles and the statistical checks run on them.

Every check returns its statistic together with the threshold it was held to, so a report can
be audited without re-running anything.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Final

import numpy as np
import numpy.typing as npt
from scipy import signal
from scipy import stats as sps

from collapse_sde.errors import StatisticsError
from collapse_sde.hilbert import (
    ComplexArray,
    IndexArray,
    RealArray,
    StateVector,
    canonical_projectors,
    pure_projector,
)
from collapse_sde.master import MasterConfig, compare_ensemble_to_master, integrate_master
from collapse_sde.models import ModelSpec, Variant, derive_fdr_params, fdr_diffusion, white_noise_limit
from collapse_sde.noise import (
    NoiseKind,
    RandomStream,
    mix64,
    ou_path,
    ou_update,
    sbm_bin_probabilities,
    sbm_evolve,
    sbm_paths,
    stationary_sample,
)
from collapse_sde.sde import UNRESOLVED_CODE, BatchResult, IntegratorConfig, check_colored_dt, integrate_batch

if TYPE_CHECKING:
    from collections.abc import Sequence

log = logging.getLogger(__name__)

#: trajectories per unit of work; fixed so results do not depend on the worker count
CHUNK_SIZE: Final = 1024
SIGNIFICANCE: Final = 0.05
N_SIGMA: Final = 3.0
#: absolute slack on Monte Carlo bands, so that a zero standard error still admits rounding
BAND_FLOOR: Final = 1e-12
MAX_UNRESOLVED_FRACTION: Final = 0.01
MIN_PATH_TO_LAG_RATIO: Final = 10
#: homogenization sweeps step at this fraction of the smallest correlation time, or finer
SWEEP_DT_RATIO: Final = 0.01


def _canonical(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return _canonical(value.tolist())
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_canonical(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def fingerprint(*parts: Any) -> str:
    """sha256 over the canonical JSON form of ``parts``."""
    text = json.dumps(_canonical(list(parts)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class CheckRow:
    name: str
    fingerprint: str
    statistic: float
    threshold: float
    passed: bool

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class CheckReport:
    name: str
    rows: tuple[CheckRow, ...]

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    def failures(self) -> list[CheckRow]:
        return [row for row in self.rows if not row.passed]

    def __add__(self, other: CheckReport) -> CheckReport:
        return CheckReport(self.name, self.rows + other.rows)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "passed": self.passed, "checks": [row.to_dict() for row in self.rows]}


@dataclass(frozen=True)
class KSResult:
    statistic: float
    n_a: int
    n_b: int
    critical_value: float
    p_value: float
    significance: float
    passed: bool

    def row(self, name: str, inputs: str) -> CheckRow:
        return CheckRow(name, inputs, self.statistic, self.critical_value, self.passed)


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    dof: int
    critical_value: float
    p_value: float
    significance: float
    passed: bool

    def row(self, name: str, inputs: str) -> CheckRow:
        return CheckRow(name, inputs, self.statistic, self.critical_value, self.passed)


@dataclass(frozen=True, eq=False)
class EnsembleSummary:
    m_trajectories: int
    #: per projector index; unresolved runs are counted separately
    outcome_counts: IndexArray
    unresolved_count: int
    checkpoint_times: RealArray
    #: (n_checkpoints, K)
    checkpoint_means: RealArray
    checkpoint_std: RealArray
    #: (m, n_checkpoints, K)
    checkpoint_populations: RealArray
    #: (n_checkpoints, N, N) estimate of E[|ψ⟩⟨ψ|]
    density_mean: ComplexArray
    #: standard error of the real parts in ``.real`` and of the imaginary parts in ``.imag``
    density_stderr: ComplexArray
    outcomes: IndexArray
    collapse_times: RealArray
    spec: ModelSpec
    psi0: StateVector
    config: IntegratorConfig
    master_seed: int
    fingerprint: str
    wall_time: float

    def checkpoint_index(self, t: float) -> int:
        if self.checkpoint_times.size:
            index = int(np.argmin(np.abs(self.checkpoint_times - t)))
            if abs(self.checkpoint_times[index] - t) <= 1e-9 * max(1.0, abs(t)):
                return index
        raise StatisticsError("no checkpoint at the requested time", t=t, checkpoints=self.checkpoint_times.tolist())

    def to_dict(self) -> dict[str, Any]:
        """Deterministic view; wall time is left out so reruns serialize identically."""
        return {
            "fingerprint": self.fingerprint,
            "m_trajectories": self.m_trajectories,
            "master_seed": self.master_seed,
            "outcome_counts": self.outcome_counts.tolist(),
            "unresolved_count": self.unresolved_count,
            "checkpoint_times": self.checkpoint_times.tolist(),
            "checkpoint_means": self.checkpoint_means.tolist(),
            "checkpoint_std": self.checkpoint_std.tolist(),
        }


@dataclass(frozen=True)
class HomogenizationResult:
    """KS distances of a τ sweep.

    ``results`` compare each colored run with a white-noise reference driven by the same normals,
    so their trend over τ is not masked by sampling noise. Coupled samples are not independent,
    so the pass at the smallest τ is decided by ``independent``, a comparison with a reference
    run on its own seed.
    """

    taus: tuple[float, ...]
    results: tuple[KSResult, ...]
    independent: KSResult
    time: float
    dt: float
    diffusion_d: float
    kind: NoiseKind
    reference_fingerprint: str
    independent_fingerprint: str

    @property
    def statistics(self) -> list[float]:
        return [result.statistic for result in self.results]

    @property
    def strictly_decreasing(self) -> bool:
        values = self.statistics
        return all(a > b for a, b in zip(values, values[1:], strict=False))

    @property
    def smallest_tau_passes(self) -> bool:
        return self.independent.passed

    def report(self) -> CheckReport:
        # each coupled distance must stay below the one at the previous, larger τ
        rows = []
        previous = 1.0
        for tau, value in zip(self.taus, self.statistics, strict=True):
            rows.append(
                CheckRow(
                    f"ks_coupled[{self.kind.value}, tau={tau:g}]",
                    self.reference_fingerprint,
                    value,
                    previous,
                    value < previous,
                )
            )
            previous = value
        rows.append(
            self.independent.row(f"ks[{self.kind.value}, tau={self.taus[-1]:g}]", self.independent_fingerprint)
        )
        return CheckReport("homogenize", tuple(rows))


@dataclass(frozen=True)
class NoiseValidation:
    kind: NoiseKind
    tau: float
    report: CheckReport


# ---------------------------------------------------------------------------
# ensembles


def _run_chunk(
    spec: ModelSpec, psi0: StateVector, config: IntegratorConfig, indices: Sequence[int], master_seed: int
) -> BatchResult:
    return integrate_batch(spec, psi0, config, indices, master_seed)


def _chunks(m: int) -> list[range]:
    return [range(start, min(start + CHUNK_SIZE, m)) for start in range(0, m, CHUNK_SIZE)]


def _density_statistics(moments: ComplexArray, m: int) -> tuple[ComplexArray, ComplexArray]:
    """Mean and componentwise standard error of ψψ† from the running moment sums."""
    first, modulus, square = moments[:, 0] / m, moments[:, 1].real / m, moments[:, 2] / m
    second_re = (modulus + square.real) / 2
    second_im = (modulus - square.real) / 2
    correction = m / (m - 1) if m > 1 else 0.0
    var_re = np.clip(second_re - first.real**2, 0.0, None) * correction
    var_im = np.clip(second_im - first.imag**2, 0.0, None) * correction
    return first, np.sqrt(var_re / m) + 1j * np.sqrt(var_im / m)


def run_ensemble(
    spec: ModelSpec,
    psi0: StateVector,
    config: IntegratorConfig,
    m: int,
    master_seed: int,
    workers: int | None = None,
) -> EnsembleSummary:
    """Trajectories ``0 … m−1``, run in fixed chunks and merged in index order."""
    if m < 1:
        raise StatisticsError("an ensemble needs at least one trajectory", m=m)
    workers = workers or os.cpu_count() or 1
    chunks = _chunks(m)
    started = time.perf_counter()
    if workers == 1 or len(chunks) == 1:
        batches = [_run_chunk(spec, psi0, config, chunk, master_seed) for chunk in chunks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(chunks))) as pool:
            futures = [pool.submit(_run_chunk, spec, psi0, config, chunk, master_seed) for chunk in chunks]
            batches = [future.result() for future in futures]
    merged = BatchResult.merge(batches)
    wall_time = time.perf_counter() - started

    n_projectors = spec.projectors.n_projectors
    resolved = merged.outcomes[merged.outcomes != UNRESOLVED_CODE]
    populations = merged.checkpoint_populations
    density_mean, density_stderr = _density_statistics(merged.checkpoint_moments, m)
    summary = EnsembleSummary(
        m_trajectories=m,
        outcome_counts=np.bincount(resolved, minlength=n_projectors),
        unresolved_count=int(m - resolved.size),
        checkpoint_times=merged.checkpoint_times,
        checkpoint_means=populations.mean(axis=0),
        checkpoint_std=populations.std(axis=0, ddof=1) if m > 1 else np.zeros(populations.shape[1:]),
        checkpoint_populations=populations,
        density_mean=density_mean,
        density_stderr=density_stderr,
        outcomes=merged.outcomes,
        collapse_times=merged.collapse_times,
        spec=spec,
        psi0=psi0,
        config=config,
        master_seed=master_seed,
        fingerprint=ensemble_fingerprint(spec, psi0, config, m, master_seed),
        wall_time=wall_time,
    )
    log.info(
        "ensemble of %d trajectories in %.2fs (%d chunks, %d workers), %d unresolved",
        m,
        wall_time,
        len(chunks),
        workers,
        summary.unresolved_count,
    )
    return summary


def ensemble_fingerprint(
    spec: ModelSpec, psi0: StateVector, config: IntegratorConfig, m: int, master_seed: int
) -> str:
    return fingerprint(spec.describe(), psi0.amplitudes, dataclasses.asdict(config), m, master_seed)


# ---------------------------------------------------------------------------
# checks


def born_check(summary: EnsembleSummary, psi0: StateVector, n_sigma: float = N_SIGMA) -> CheckReport:
    """``|count_k/m − ⟨P_k⟩₀| ≤ n_sigma·√(p(1 − p)/m)`` for every projector."""
    m = summary.m_trajectories
    if summary.unresolved_count / m >= MAX_UNRESOLVED_FRACTION:
        raise StatisticsError(
            f"{summary.unresolved_count} of {m} trajectories unresolved; increase t_max",
            unresolved=summary.unresolved_count,
            m=m,
        )
    expected = summary.spec.projectors.populations(psi0.amplitudes)
    rows = []
    for k, p in enumerate(expected):
        fraction = summary.outcome_counts[k] / m
        threshold = n_sigma * math.sqrt(p * (1 - p) / m) + BAND_FLOOR
        margin = abs(fraction - p)
        passed = bool(margin <= threshold)
        rows.append(CheckRow(f"born[{k}]", summary.fingerprint, float(margin), threshold, passed))
    return CheckReport("born", tuple(rows))


def martingale_check(summary: EnsembleSummary, psi0: StateVector, n_sigma: float = N_SIGMA) -> CheckReport:
    """``|mean ⟨P_k⟩(t) − ⟨P_k⟩(0)| ≤ n_sigma·s/√m`` at every checkpoint."""
    if not summary.checkpoint_times.size:
        raise StatisticsError("the ensemble recorded no checkpoints")
    expected = summary.spec.projectors.populations(psi0.amplitudes)
    root_m = math.sqrt(summary.m_trajectories)
    rows = []
    for slot, t in enumerate(summary.checkpoint_times):
        for k, p in enumerate(expected):
            margin = abs(summary.checkpoint_means[slot, k] - p)
            threshold = n_sigma * summary.checkpoint_std[slot, k] / root_m + BAND_FLOOR
            name = f"martingale[{k}, t={t:g}]"
            passed = bool(margin <= threshold)
            rows.append(CheckRow(name, summary.fingerprint, float(margin), float(threshold), passed))
    return CheckReport("martingale", tuple(rows))


def ks_critical_value(n_a: int, n_b: int, significance: float = SIGNIFICANCE) -> float:
    """Asymptotic two-sample critical value ``c(α)·√((n + m)/(n·m))``."""
    return math.sqrt(-math.log(significance / 2) / 2) * math.sqrt((n_a + n_b) / (n_a * n_b))


def ks_statistic(
    sample_a: npt.ArrayLike, sample_b: npt.ArrayLike, significance: float = SIGNIFICANCE
) -> KSResult:
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise StatisticsError("KS test needs two nonempty samples", n_a=a.size, n_b=b.size)
    result = sps.ks_2samp(a, b, method="asymp")
    critical = ks_critical_value(a.size, b.size, significance)
    statistic = float(result.statistic)
    return KSResult(statistic, a.size, b.size, critical, float(result.pvalue), significance, statistic < critical)


def chi_square_check(
    counts: npt.ArrayLike, probabilities: npt.ArrayLike, significance: float = SIGNIFICANCE
) -> ChiSquareResult:
    """Pearson goodness of fit of binned counts against bin probabilities."""
    observed = np.asarray(counts, dtype=np.float64)
    expected = np.asarray(probabilities, dtype=np.float64) * observed.sum()
    if observed.shape != expected.shape or observed.size < 2:
        raise StatisticsError("need matching count and probability vectors of at least two bins")
    if np.any(expected <= 0):
        raise StatisticsError("every bin needs a positive expected count", expected=expected.tolist())
    if np.any(expected < 5):
        log.warning("chi-square bins with fewer than 5 expected counts: %s", expected[expected < 5])
    statistic = float(np.sum((observed - expected) ** 2 / expected))
    dof = observed.size - 1
    critical = float(sps.chi2.ppf(1 - significance, dof))
    p_value = float(sps.chi2.sf(statistic, dof))
    return ChiSquareResult(statistic, dof, critical, p_value, significance, statistic < critical)


def _autocovariance(chains: RealArray, n_lags: int) -> RealArray:
    """Biased autocovariance of each column of ``chains``, shape (n_lags + 1, n_chains)."""
    centered = chains - chains.mean(axis=0)
    n = centered.shape[0]
    values = np.empty((n_lags + 1, centered.shape[1]))
    for column in range(centered.shape[1]):
        full = signal.correlate(centered[:, column], centered[:, column], mode="full", method="fft")
        values[:, column] = full[n - 1 : n + n_lags] / n
    return values


def _as_chains(path: npt.ArrayLike, dt: float, max_lag: float) -> tuple[RealArray, int]:
    chains = np.asarray(path, dtype=np.float64)
    if chains.ndim == 1:
        chains = chains[:, None]
    if chains.ndim != 2:
        raise StatisticsError("expected a path or a (steps, chains) array", shape=chains.shape)
    if not dt > 0 or max_lag < 0:
        raise StatisticsError("need dt > 0 and max_lag >= 0", dt=dt, max_lag=max_lag)
    n_lags = round(max_lag / dt)
    if chains.shape[0] < MIN_PATH_TO_LAG_RATIO * (n_lags + 1):
        raise StatisticsError(
            "path too short for the requested lag", length=chains.shape[0], lag_steps=n_lags
        )
    return chains, n_lags


def autocorrelation_estimate(path: npt.ArrayLike, dt: float, max_lag: float) -> tuple[RealArray, RealArray]:
    """Lags and the biased empirical autocovariance ``(1/n) Σ_t (x_t − x̄)(x_{t+h} − x̄)``.

    A 2-D ``path`` is read as independent chains in its columns; their estimates are averaged.
    """
    chains, n_lags = _as_chains(path, dt, max_lag)
    return np.arange(n_lags + 1) * dt, _autocovariance(chains, n_lags).mean(axis=1)


def block_standard_error(path: npt.ArrayLike, dt: float, lag: float, n_blocks: int = 20) -> float:
    """Standard error of the autocovariance at ``lag`` from the spread over blocks.

    A 1-D path is cut into ``n_blocks`` contiguous blocks; the chains of a 2-D array are used
    as the blocks directly.
    """
    chains = np.asarray(path, dtype=np.float64)
    if chains.ndim == 1:
        usable = chains.size - chains.size % n_blocks
        chains = chains[:usable].reshape(n_blocks, -1).T
    chains, n_lags = _as_chains(chains, dt, lag)
    if chains.shape[1] < 2:
        raise StatisticsError("need at least two blocks", blocks=chains.shape[1])
    estimates = _autocovariance(chains, n_lags)[n_lags]
    return float(estimates.std(ddof=1) / math.sqrt(estimates.size))


# ---------------------------------------------------------------------------
# homogenization


def homogenization_sweep(
    spec_colored: ModelSpec,
    psi0: StateVector,
    tau_list: Sequence[float],
    config: IntegratorConfig,
    m: int,
    master_seed: int,
    workers: int | None = None,
    time_point: float | None = None,
) -> HomogenizationResult:
    """KS distance between colored and white-noise laws of ⟨P_0⟩(T) for each τ, at fixed 𝒟.

    G is re-derived per τ from ``𝒟 = 2E∞[ξ²]G²τ``. Every run uses one step, at most
    ``SWEEP_DT_RATIO`` of the smallest τ. The coupled reference is the white-noise limit
    integrated with the Heun rule on ``master_seed``, so channel k of it and of every colored run
    is driven by the same normal sequence. The independent reference runs on ``mix64(master_seed)``.
    """
    if not spec_colored.variant.is_colored:
        raise StatisticsError("homogenization needs the colored model", variant=spec_colored.variant.value)
    taus = tuple(float(t) for t in tau_list)
    if not taus or any(a <= b for a, b in zip(taus, taus[1:], strict=False)):
        raise StatisticsError("tau_list must be nonempty and strictly descending", taus=list(taus))
    base = spec_colored
    if base.diffusion_d is None:
        base = derive_fdr_params(base.replace(noise_g=None, fdr_enforced=False))
    diffusion_d = base.diffusion_d
    assert diffusion_d is not None
    t_point = time_point if time_point is not None else 0.5 / base.collapse_rate
    dt = min(config.dt, SWEEP_DT_RATIO * taus[-1])
    run_config = dataclasses.replace(config, dt=dt, t_max=t_point, checkpoints=(t_point,))

    specs = [
        derive_fdr_params(base.replace(tau=tau, noise_g=None, diffusion_d=diffusion_d, fdr_enforced=False))
        for tau in taus
    ]
    for spec in specs:
        check_colored_dt(spec, run_config.dt)
    white = white_noise_limit(specs[0])
    reference = run_ensemble(white, psi0, run_config, m, master_seed, workers)
    reference_sample = reference.checkpoint_populations[:, 0, 0]
    results: list[KSResult] = []
    samples: list[RealArray] = []
    for tau, spec in zip(taus, specs, strict=True):
        colored = run_ensemble(spec, psi0, run_config, m, master_seed, workers)
        samples.append(colored.checkpoint_populations[:, 0, 0])
        result = ks_statistic(samples[-1], reference_sample)
        log.info("tau=%g G=%.4g: coupled KS %.4f", tau, spec.noise_g, result.statistic)
        results.append(result)
    independent_reference = run_ensemble(white, psi0, run_config, m, mix64(master_seed), workers)
    independent = ks_statistic(samples[-1], independent_reference.checkpoint_populations[:, 0, 0])
    log.info(
        "tau=%g against an independent reference: KS %.4f (critical %.4f)",
        taus[-1],
        independent.statistic,
        independent.critical_value,
    )
    return HomogenizationResult(
        taus,
        tuple(results),
        independent,
        t_point,
        dt,
        diffusion_d,
        base.noise_kind,
        reference.fingerprint,
        independent_reference.fingerprint,
    )


# ---------------------------------------------------------------------------
# noise oracles


@dataclass(frozen=True)
class NoiseSuiteSizes:
    """Sample sizes of the noise oracle suite."""

    ou_variance_steps: int = 1_000_000
    ou_correlation_steps: int = 1_000_000
    ou_conditional_chains: int = 10_000
    sbm_correlation_chains: int = 20
    sbm_correlation_steps: int = 50_000
    sbm_stationary_chains: int = 20_000
    sbm_transition_chains: int = 200_000
    n_bins: int = 20
    legendre_order: int = 40


def _stream(master_seed: int, check: int) -> RandomStream:
    return RandomStream.for_channel(master_seed, check, 0)


def _band_row(name: str, inputs: str, estimate: float, expected: float, stderr: float) -> CheckRow:
    threshold = N_SIGMA * stderr
    margin = abs(estimate - expected)
    return CheckRow(name, inputs, margin, threshold, bool(margin <= threshold))


def _conditional_mean_row(
    kind: NoiseKind, tau: float, master_seed: int, inputs: str, chains: int
) -> CheckRow:
    xi0, horizon = 0.5, tau
    if kind is NoiseKind.OU:
        values = np.full(chains, xi0)
        for eta in _stream(master_seed, 100).normal((10, chains)):
            values = ou_update(values, tau / 10, tau, eta)
    else:
        dt = tau / 100
        values = sbm_evolve(np.full(chains, xi0), dt, tau, 100, _stream(master_seed, 100))
    expected = float(kind.conditional_mean(xi0, horizon, tau))
    stderr = float(values.std(ddof=1) / math.sqrt(values.size))
    return _band_row("conditional_mean", inputs, float(values.mean()), expected, stderr)


def validate_noise(
    kind: NoiseKind, tau: float = 1.0, master_seed: int = 0, sizes: NoiseSuiteSizes | None = None
) -> NoiseValidation:
    """Check a noise generator against its analytic statistics."""
    sizes = sizes or NoiseSuiteSizes()
    inputs = fingerprint(kind.value, tau, master_seed, dataclasses.asdict(sizes))
    expected_lag = float(kind.autocovariance(tau, tau))
    rows: list[CheckRow] = []
    if kind is NoiseKind.OU:
        x0 = float(stationary_sample(kind, _stream(master_seed, 1)))
        path = ou_path(x0, tau, tau, sizes.ou_variance_steps, _stream(master_seed, 2))
        variance = float(path.var())
        rows.append(CheckRow("stationary_variance", inputs, abs(variance - 1.0), 0.01, abs(variance - 1.0) <= 0.01))
        dt = tau / 10
        x0 = float(stationary_sample(kind, _stream(master_seed, 3)))
        path = ou_path(x0, dt, tau, sizes.ou_correlation_steps, _stream(master_seed, 4))
        _, values = autocorrelation_estimate(path, dt, tau)
        stderr = block_standard_error(path, dt, tau)
        rows.append(_band_row("autocovariance_at_tau", inputs, float(values[-1]), expected_lag, stderr))
        rows.append(_conditional_mean_row(kind, tau, master_seed, inputs, sizes.ou_conditional_chains))
    else:
        dt = tau / 100
        starts = stationary_sample(kind, _stream(master_seed, 5), sizes.sbm_correlation_chains)
        paths = sbm_paths(starts, dt, tau, sizes.sbm_correlation_steps, _stream(master_seed, 6))
        _, values = autocorrelation_estimate(paths, dt, tau)
        stderr = block_standard_error(paths, dt, tau)
        rows.append(_band_row("autocovariance_at_tau", inputs, float(values[-1]), expected_lag, stderr))

        edges = np.linspace(-1.0, 1.0, sizes.n_bins + 1)
        dt = tau / 200
        finals = sbm_evolve(np.full(sizes.sbm_stationary_chains, 0.5), dt, tau, 2000, _stream(master_seed, 7))
        counts, _ = np.histogram(finals, bins=edges)
        # the stationary law is flat, so its density at a bin centre integrates the bin exactly
        stationary = kind.stationary_density((edges[:-1] + edges[1:]) / 2) * np.diff(edges)
        uniform = chi_square_check(counts, stationary)
        rows.append(uniform.row("stationary_uniform", inputs))

        dt, horizon, xi0 = tau / 1000, 0.5 * tau, 0.5
        finals = sbm_evolve(np.full(sizes.sbm_transition_chains, xi0), dt, tau, 500, _stream(master_seed, 8))
        counts, _ = np.histogram(finals, bins=edges)
        series = sbm_bin_probabilities(edges, xi0, horizon, tau, sizes.legendre_order)
        rows.append(chi_square_check(counts, series).row("transition_density", inputs))
        factorial = sbm_bin_probabilities(edges, xi0, horizon, tau, sizes.legendre_order, factorial_weight=True)
        rows.append(_factorial_variant_row(counts, factorial, inputs))
        rows.append(_conditional_mean_row(kind, tau, master_seed, inputs, sizes.ou_conditional_chains))
    report = CheckReport(f"noise-validate[{kind.value}]", tuple(rows))
    for row in report.failures():
        log.warning("noise check %s failed: %.4g > %.4g", row.name, row.statistic, row.threshold)
    return NoiseValidation(kind, tau, report)


def _factorial_variant_row(counts: RealArray, probabilities: RealArray, inputs: str) -> CheckRow:
    """Passes when the histogram rejects the (n!)²-weighted series."""
    name = "transition_density_factorial_variant_rejected"
    if np.any(probabilities <= 0):
        return CheckRow(name, inputs, math.inf, 0.0, True)
    result = chi_square_check(counts, probabilities)
    return CheckRow(name, inputs, result.statistic, result.critical_value, not result.passed)


# ---------------------------------------------------------------------------
# Born-rule acceptance suite


def born_suite(
    master_seed: int = 0,
    m: int = 5000,
    dt: float = 2e-3,
    t_max: float = 20.0,
    workers: int | None = None,
) -> CheckReport:
    """Born statistics, martingale diagonals, master-equation agreement and FDR necessity.

    Units have 𝒥 = 𝒩 = ħ = 1, so times are in collapse times ħ/(𝒥𝒩).
    """
    checkpoints = (0.25, 0.5, 1.0)
    config = IntegratorConfig(dt=dt, t_max=t_max, checkpoints=checkpoints)
    two = canonical_projectors(2)
    psi_two = StateVector.from_populations([0.8, 0.2])

    ito_two = derive_fdr_params(ModelSpec(Variant.TWO_STATE_ITO, two, 1.0, 1.0))
    summary = run_ensemble(ito_two, psi_two, config, m, master_seed, workers)
    report = born_check(summary, psi_two) + martingale_check(summary, psi_two)
    solution = integrate_master(ito_two, pure_projector(psi_two), MasterConfig(dt=1e-3, t_max=0.5))
    comparison = compare_ensemble_to_master(summary, solution, 0.5)
    report += CheckReport(
        "master",
        (
            CheckRow(
                "master_agreement[t=0.5]",
                summary.fingerprint,
                comparison.deviation,
                comparison.threshold,
                comparison.passed,
            ),
        ),
    )

    psi_three = StateVector.from_populations([0.5, 0.3, 0.2])
    ito_three = derive_fdr_params(ModelSpec(Variant.N_STATE_ITO, canonical_projectors(3), 1.0, 1.0))
    report += born_check(run_ensemble(ito_three, psi_three, config, m, master_seed, workers), psi_three)

    strat = ModelSpec(Variant.N_STATE_STRAT, two, 1.0, 1.0)
    with_fdr = run_ensemble(derive_fdr_params(strat), psi_two, config, m, master_seed, workers)
    report += martingale_check(with_fdr, psi_two)
    doubled = strat.replace(diffusion_d=2 * fdr_diffusion(strat))
    broken = run_ensemble(doubled, psi_two, config, m, master_seed, workers)
    broken_report = martingale_check(broken, psi_two)
    worst = max(broken_report.rows, key=lambda row: row.statistic - row.threshold)
    report += CheckReport(
        "fdr",
        (
            CheckRow(
                "martingale_fails_without_fdr",
                broken.fingerprint,
                worst.statistic,
                worst.threshold,
                not broken_report.passed,
            ),
        ),
    )
    return CheckReport("born-suite", report.rows)
