"""Integrator steps and the batch trajectory engine."""

import itertools
import math

import numpy as np
import pytest

from collapse_sde.errors import IntegrationError, ModelError, TrajectoryError
from collapse_sde.hilbert import StateVector, basis_state
from collapse_sde.models import Variant, terms_kernel
from collapse_sde.noise import ColoredNoiseState, NoiseKind, RandomStream, ou_update
from collapse_sde.sde import (
    UNRESOLVED,
    UNRESOLVED_CODE,
    IntegratorConfig,
    colored_step,
    em_step,
    heun_step,
    integrate_batch,
    outcome_label,
    rk4_update,
    run_trajectory,
)
from collapse_sde.stats import ks_statistic

SYMMETRIC = StateVector(np.array([1, 1]) / math.sqrt(2))


@pytest.mark.parametrize(
    "dt, t_max, n_steps",
    [(0.1, 0.3, 3), (0.4, 1.0, 3), (1e-3, 1.0, 1000), (0.25, 1.0, 4)],
)
def test_step_count(dt, t_max, n_steps):
    assert IntegratorConfig(dt=dt, t_max=t_max).n_steps == n_steps


@pytest.mark.parametrize(
    "params",
    [
        {"dt": 0.0, "t_max": 1.0},
        {"dt": 0.1, "t_max": -1.0},
        {"dt": 0.1, "t_max": 1.0, "collapse_epsilon": 0.5},
        {"dt": 0.1, "t_max": 1.0, "record_stride": 0},
        {"dt": 0.1, "t_max": 1.0, "checkpoints": (0.5, 2.0)},
    ],
)
def test_config_validation(params):
    with pytest.raises(IntegrationError):
        IntegratorConfig(**params)


def test_checkpoints_are_sorted():
    config = IntegratorConfig(dt=0.01, t_max=1.0, checkpoints=(1.0, 0.25))
    assert config.checkpoints == (0.25, 1.0)
    assert config.checkpoint_steps == (25, 100)


@pytest.mark.parametrize("variant", [Variant.TWO_STATE_ITO, Variant.N_STATE_ITO])
def test_em_zero_increments(make_spec, variant):
    spec = make_spec(variant)
    dt = 0.01
    stepped = em_step(spec, SYMMETRIC, dt, [0.0] * spec.n_channels, renormalize=False)
    assert np.allclose(stepped.amplitudes, (1 - dt / 4) * SYMMETRIC.amplitudes, atol=1e-15)
    assert not stepped.is_normalized


def test_heun_evaluates_at_the_midpoint(make_spec):
    spec = make_spec(Variant.N_STATE_STRAT, n_dim=3)
    psi = StateVector.from_populations([0.5, 0.3, 0.2], phases=[0, 1, 2])
    dt, dw = 0.01, np.array([0.05, -0.02, 0.01])

    def increment(at):
        drift, diffusion = terms_kernel(spec, at)
        return drift * dt + diffusion.T @ dw

    predicted = psi.amplitudes + increment(psi.amplitudes)
    expected = psi.amplitudes + increment((psi.amplitudes + predicted) / 2)
    stepped = heun_step(spec, psi, dt, dw, renormalize=False)
    assert np.allclose(stepped.amplitudes, expected, atol=1e-14)


def test_em_mean_norm_change_is_second_order(make_spec):
    # sign combinations of ±√dt reproduce the first two moments of the increments exactly
    spec = make_spec(Variant.N_STATE_ITO, n_dim=3)
    psi = StateVector.from_populations([0.5, 0.3, 0.2], phases=[0, 0.4, 2.0])
    dt = 1e-3
    drift, _ = terms_kernel(spec, psi.amplitudes)
    changes = [
        em_step(spec, psi, dt, np.array(signs) * math.sqrt(dt), renormalize=False).norm ** 2 - 1
        for signs in itertools.product([-1, 1], repeat=3)
    ]
    assert np.mean(changes) == pytest.approx(np.sum(np.abs(drift) ** 2) * dt**2, abs=1e-14)


@pytest.mark.parametrize(
    "variant, stepper",
    [
        (Variant.TWO_STATE_ITO, em_step),
        (Variant.N_STATE_ITO, em_step),
        (Variant.TWO_STATE_STRAT, heun_step),
        (Variant.N_STATE_STRAT, heun_step),
    ],
)
def test_collapsed_states_are_fixed(make_spec, rng, variant, stepper):
    n_dim = 2 if variant.is_two_state else 4
    spec = make_spec(variant, n_dim=n_dim)
    for k in range(n_dim):
        psi = basis_state(n_dim, k)
        stepped = stepper(spec, psi, 0.01, rng.standard_normal(spec.n_channels) * 0.1)
        assert np.array_equal(stepped.amplitudes, psi.amplitudes)


def test_stepper_variant_checks(make_spec):
    ito = make_spec(Variant.TWO_STATE_ITO)
    strat = make_spec(Variant.TWO_STATE_STRAT)
    with pytest.raises(IntegrationError, match="Itô"):
        em_step(strat, SYMMETRIC, 0.01, [0.0])
    with pytest.raises(IntegrationError, match="Stratonovich"):
        heun_step(ito, SYMMETRIC, 0.01, [0.0])
    with pytest.raises(IntegrationError, match="colored"):
        colored_step(ito, SYMMETRIC, ColoredNoiseState(NoiseKind.OU, [0.0], 1.0), 0.01, RandomStream(0, 0))
    with pytest.raises(IntegrationError, match="one increment per channel"):
        em_step(ito, SYMMETRIC, 0.01, [0.0, 0.0])
    with pytest.raises(IntegrationError, match="positive"):
        em_step(ito, SYMMETRIC, 0.0, [0.0])
    with pytest.raises(ModelError, match="dimensions"):
        em_step(ito, basis_state(3, 0), 0.01, [0.0])


def test_colored_step_advances_noise_first(make_spec):
    spec = make_spec(Variant.COLORED_N_STATE, n_dim=3, tau=0.1)
    psi = StateVector.from_populations([0.5, 0.3, 0.2])
    xi = ColoredNoiseState(NoiseKind.OU, [0.3, -1.2, 0.5], 0.1)
    dt = 0.005
    stepped, advanced = colored_step(spec, psi, xi, dt, RandomStream(9, 1), renormalize=False)
    expected_xi = ou_update(xi.xi, dt, 0.1, RandomStream(9, 1).normal(3))
    assert np.allclose(advanced.xi, expected_xi, atol=1e-15)
    expected_psi = rk4_update(spec, psi.amplitudes, dt, (xi.xi + expected_xi) / 2)
    assert np.allclose(stepped.amplitudes, expected_psi, atol=1e-15)


def test_colored_step_guards(make_spec):
    spec = make_spec(Variant.COLORED_N_STATE, tau=0.1)
    xi = ColoredNoiseState(NoiseKind.OU, [0.0, 0.0], 0.1)
    with pytest.raises(IntegrationError, match="tau/10"):
        colored_step(spec, SYMMETRIC, xi, 0.02, RandomStream(0, 0))
    with pytest.raises(ModelError, match="does not match"):
        colored_step(spec, SYMMETRIC, ColoredNoiseState(NoiseKind.SBM, [0.0, 0.0], 0.1), 0.01, RandomStream(0, 0))
    with pytest.raises(IntegrationError, match="one stream per channel"):
        colored_step(spec, SYMMETRIC, xi, 0.01, [RandomStream(0, 0)])


def test_colored_norm_is_conserved_to_rk4_accuracy(make_spec):
    spec = make_spec(Variant.COLORED_N_STATE, n_dim=3, tau=0.1)
    psi = StateVector.from_populations([0.5, 0.3, 0.2])
    xi = ColoredNoiseState(NoiseKind.OU, [0.3, -1.2, 0.5], 0.1)
    stepped, _ = colored_step(spec, psi, xi, 0.001, RandomStream(1, 1), renormalize=False)
    assert stepped.norm == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize(
    "variant, n_dim",
    [(Variant.TWO_STATE_ITO, 2), (Variant.N_STATE_STRAT, 3), (Variant.COLORED_N_STATE, 3)],
)
def test_batch_composition_does_not_matter(make_spec, variant, n_dim):
    spec = make_spec(variant, n_dim=n_dim)
    psi0 = StateVector.from_populations(np.arange(1, n_dim + 1))
    config = IntegratorConfig(dt=0.005, t_max=0.5, checkpoints=(0.25,))
    alone = integrate_batch(spec, psi0, config, [5], master_seed=3)
    together = integrate_batch(spec, psi0, config, [9, 5, 2], master_seed=3)
    assert np.array_equal(alone.final_states[0], together.final_states[1])
    assert np.array_equal(alone.checkpoint_populations[0], together.checkpoint_populations[1])
    assert alone.outcomes[0] == together.outcomes[1]


def test_batch_seeds_differ(make_spec):
    spec = make_spec(Variant.TWO_STATE_ITO)
    config = IntegratorConfig(dt=0.01, t_max=0.2)
    a = integrate_batch(spec, SYMMETRIC, config, [0, 1], master_seed=0)
    b = integrate_batch(spec, SYMMETRIC, config, [0, 1], master_seed=1)
    assert not np.array_equal(a.final_states[0], a.final_states[1])
    assert not np.array_equal(a.final_states[0], b.final_states[0])


def test_batch_rejects_bad_input(make_spec):
    spec = make_spec(Variant.TWO_STATE_ITO)
    config = IntegratorConfig(dt=0.01, t_max=0.1)
    with pytest.raises(IntegrationError, match="at least one"):
        integrate_batch(spec, SYMMETRIC, config, [], master_seed=0)
    with pytest.raises(ModelError):
        integrate_batch(spec, basis_state(3, 0), config, [0], master_seed=0)
    with pytest.raises(IntegrationError, match="normalized"):
        integrate_batch(spec, StateVector([1, 1], check_norm=False), config, [0], master_seed=0)


def test_collapsed_start_resolves_immediately(make_spec):
    spec = make_spec(Variant.N_STATE_ITO, n_dim=3)
    config = IntegratorConfig(dt=0.01, t_max=1.0, checkpoints=(0.5, 1.0))
    record = run_trajectory(spec, basis_state(3, 2), config, trajectory_index=0, master_seed=0)
    assert record.final_outcome == 2
    assert record.collapse_time == 0.0
    assert record.times.tolist() == [0.0]
    assert np.array_equal(record.checkpoint_populations, [[0, 0, 1], [0, 0, 1]])


def test_short_horizon_is_unresolved(make_spec):
    spec = make_spec(Variant.TWO_STATE_ITO)
    config = IntegratorConfig(dt=0.01, t_max=0.1, record_stride=3)
    record = run_trajectory(spec, SYMMETRIC, config, trajectory_index=4, master_seed=1)
    assert record.final_outcome == UNRESOLVED
    assert not record.resolved
    assert record.collapse_time is None
    assert np.allclose(record.times, [0.0, 0.03, 0.06, 0.09, 0.1])
    assert np.allclose(record.norms, 1.0)
    assert record.sidecar()["trajectory_index"] == 4


def test_trajectory_is_reproducible(make_spec):
    spec = make_spec(Variant.N_STATE_STRAT, n_dim=3)
    psi0 = StateVector.from_populations([0.2, 0.3, 0.5])
    config = IntegratorConfig(dt=0.01, t_max=2.0)
    first = run_trajectory(spec, psi0, config, trajectory_index=7, master_seed=11)
    second = run_trajectory(spec, psi0, config, trajectory_index=7, master_seed=11)
    assert np.array_equal(first.populations, second.populations)
    assert first.final_outcome == second.final_outcome


def test_non_finite_state_is_reported(make_spec, monkeypatch):
    monkeypatch.setattr("collapse_sde.sde.em_update", lambda spec, psi, dt, dw: psi * np.nan)
    spec = make_spec(Variant.TWO_STATE_ITO)
    config = IntegratorConfig(dt=0.01, t_max=0.1)
    with pytest.raises(TrajectoryError) as excinfo:
        integrate_batch(spec, SYMMETRIC, config, [4, 7], master_seed=12)
    assert excinfo.value.context == {"step": 1, "trajectory_index": 4, "master_seed": 12}
    assert excinfo.value.exit_code == 15


def test_outcome_label():
    assert outcome_label(UNRESOLVED_CODE) == UNRESOLVED
    assert outcome_label(3) == 3


@pytest.mark.stochastic
def test_heun_and_em_agree_in_law(make_spec):
    strat = make_spec(Variant.N_STATE_STRAT, n_dim=3)
    ito = make_spec(Variant.N_STATE_ITO, n_dim=3)
    psi0 = StateVector.from_populations([0.5, 0.3, 0.2], phases=[0, 0.4, 2.0])
    config = IntegratorConfig(dt=2e-3, t_max=0.5, checkpoints=(0.5,))
    indices = range(2000)
    heun = integrate_batch(strat, psi0, config, indices, master_seed=5)
    euler = integrate_batch(ito, psi0, config, indices, master_seed=6)
    result = ks_statistic(heun.checkpoint_populations[:, 0, 0], euler.checkpoint_populations[:, 0, 0])
    assert result.passed


@pytest.mark.stochastic
def test_collapsed_runs_stay_absorbed(make_spec):
    # by optional stopping, falling from 1 − ε back below 1 − λε has probability at most 1/λ
    epsilon = 1e-6
    spec = make_spec(Variant.TWO_STATE_ITO)
    psi0 = StateVector.from_populations([1 - epsilon, epsilon])
    config = IntegratorConfig(dt=1e-3, t_max=5.0, collapse_epsilon=epsilon, stop_at_collapse=False)
    m = 100
    batch = integrate_batch(spec, psi0, config, range(m), master_seed=2, record=True)
    assert batch.record is not None
    lowest = batch.record.populations[:, :, 0].min(axis=0)
    assert np.all(lowest >= 1 - 1e4 * epsilon)
    fallen = int(np.sum(lowest < 1 - 10 * epsilon))
    assert fallen <= m / 10 + 3 * math.sqrt(m * 0.1 * 0.9)


def _norm_drift(spec, psi0, dt, m):
    config = IntegratorConfig(dt=dt, t_max=0.5, renormalize_each_step=False, stop_at_collapse=False)
    batch = integrate_batch(spec, psi0, config, range(m), master_seed=8)
    return float(np.mean(np.abs(np.sum(np.abs(batch.final_states) ** 2, axis=-1) - 1)))


@pytest.mark.slow
@pytest.mark.stochastic
@pytest.mark.parametrize("variant, n_dim", [(Variant.TWO_STATE_STRAT, 2), (Variant.N_STATE_STRAT, 3)])
def test_heun_norm_drift_shrinks_with_the_step(make_spec, variant, n_dim):
    spec = make_spec(variant, n_dim=n_dim)
    psi0 = StateVector.from_populations(np.arange(1, n_dim + 1), phases=np.linspace(0, 1, n_dim))
    coarse = _norm_drift(spec, psi0, 0.02, 1000)
    fine = _norm_drift(spec, psi0, 0.01, 1000)
    assert coarse > 0
    assert coarse / fine > 1.5


@pytest.mark.slow
@pytest.mark.stochastic
@pytest.mark.parametrize("variant, n_dim", [(Variant.TWO_STATE_ITO, 2), (Variant.N_STATE_ITO, 3)])
def test_em_weak_self_convergence(make_spec, variant, n_dim):
    spec = make_spec(variant, n_dim=n_dim)
    psi0 = StateVector.from_populations(np.linspace(0.8, 0.2, n_dim))
    m = 5000
    observed = []
    for dt, seed in [(1e-3, 21), (5e-4, 22)]:
        config = IntegratorConfig(dt=dt, t_max=0.5, checkpoints=(0.5,))
        p = integrate_batch(spec, psi0, config, range(m), master_seed=seed).checkpoint_populations[:, 0, 0]
        observed.append(p * (1 - p))
    coarse, fine = observed
    error = math.sqrt(coarse.var() / m + fine.var() / m)
    assert abs(coarse.mean() - fine.mean()) <= 4 * error


@pytest.mark.slow
@pytest.mark.stochastic
def test_n_state_reduces_to_two_state(make_spec):
    # the two channels combine into one increment (dW0 − dW1)/√2
    n_state = make_spec(Variant.N_STATE_STRAT)
    two_state = make_spec(Variant.TWO_STATE_STRAT)
    psi0 = StateVector.from_populations([0.8, 0.2], phases=[0, 0.7])
    config = IntegratorConfig(dt=2e-3, t_max=0.5, checkpoints=(0.5,))
    indices = range(2000)
    channels = integrate_batch(n_state, psi0, config, indices, master_seed=13)
    single = integrate_batch(two_state, psi0, config, indices, master_seed=14)
    result = ks_statistic(channels.checkpoint_populations[:, 0, 0], single.checkpoint_populations[:, 0, 0])
    assert result.passed
