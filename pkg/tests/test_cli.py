"""Configuration parsing, output files and exit codes of the command line."""

import json

import numpy as np
import pytest

from collapse_sde import cli
from collapse_sde.cli import (
    OUTPUT_ENV,
    Mode,
    default_config,
    execute,
    output_directory,
    parse_config,
)
from collapse_sde.errors import ConfigError, FDRError
from collapse_sde.models import Variant
from collapse_sde.stats import CheckReport, CheckRow, NoiseValidation


def read_table(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# collapse-sde ")
    assert lines[1].startswith("# fingerprint ")
    columns = lines[2].split(",")
    return columns, np.loadtxt(path, delimiter=",", skiprows=3, ndmin=2)


@pytest.fixture
def write_config(tmp_path):
    def factory(document: dict, name: str = "run.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document))
        return str(path)

    return factory


@pytest.mark.parametrize(
    "mode, dt",
    [
        ("trajectory", 0.01),
        ("ensemble", 0.01),
        ("master", 0.01),
        ("born-suite", 2e-3),
        ("homogenize", 1e-3),
    ],
)
def test_default_step(mode, dt):
    assert default_config(mode).integrator.dt == pytest.approx(dt)


def test_mode_defaults():
    ensemble = default_config(Mode.ENSEMBLE)
    assert ensemble.integrator.checkpoints == (0.25, 0.5, 1.0)
    homogenize = default_config("homogenize")
    assert homogenize.model.variant is Variant.COLORED_N_STATE
    assert homogenize.m == 2000
    assert default_config("master").initial_populations == (0.5, 0.5)


def test_config_round_trip():
    document = {
        "mode": "ensemble",
        "model": {
            "variant": "NStateStrat",
            "labels": [0, 1, 1],
            "script_j": 2.0,
            "hamiltonian": [[0, [0, 1], 0], [[0, -1], 1, 0], [0, 0, 2]],
        },
        "initial_populations": [0.5, 0.25, 0.25],
        "initial_phases": [0, 1, 2],
        "integrator": {"t_max": 3, "checkpoints": [1, 0.5]},
        "m": 64,
        "master_seed": 7,
    }
    config = parse_config(json.dumps(document))
    assert config.model.dim == 3
    assert config.integrator.dt == pytest.approx(0.005)
    again = parse_config(config.to_json())
    assert again == config
    assert again.to_dict() == config.to_dict()


def test_hamiltonian_entries_reach_the_model():
    config = parse_config(json.dumps({"mode": "master", "model": {"hamiltonian": [[1, [0, 1]], [[0, -1], -1]]}}))
    entries = config.spec().hamiltonian.entries
    assert entries == pytest.approx(np.array([[1, 1j], [-1j, -1]]))


@pytest.mark.parametrize(
    "document, path",
    [
        ({"mode": "trajectory", "model": {"tua": 1}}, "$.model.tua"),
        ({"mode": "trajectory", "extra": 1}, "$.extra"),
        ({"mode": "trajectory", "integrator": {"dt": "small"}}, "$.integrator.dt"),
        ({"mode": "trajectory", "integrator": {"collapse_epsilon": 0.7}}, "$.integrator"),
        ({"mode": "master", "master": {"record_stride": 0}}, "$.master"),
        ({"mode": "trajectory", "m": 2.5}, "$.m"),
        ({"mode": "trajectory", "m": 0}, "$.m"),
        ({"mode": "trajectory", "initial_populations": [0.5, "x"]}, "$.initial_populations[1]"),
        ({"mode": "trajectory", "initial_populations": [0.5, 0.25, 0.25]}, "$.initial_populations"),
        ({"mode": "trajectory", "initial_phases": [0.0]}, "$.initial_phases"),
        ({"mode": "trajectory", "model": {"variant": "ThreeState"}}, "$.model.variant"),
        ({"mode": "trajectory", "model": {"labels": [0, 1], "dim": 3}}, "$.model.labels"),
        ({"mode": "trajectory", "model": {"hamiltonian": [[0, "a"], [0, 0]]}}, "$.model.hamiltonian[0][1]"),
        ({"mode": "trajectory", "model": {"enforce_fdr": 1}}, "$.model.enforce_fdr"),
        ({"mode": "trajectory", "master_seed": -1}, "$.master_seed"),
        ({"mode": "homogenize", "model": {"variant": "TwoStateIto"}}, "$.model.variant"),
        ({"mode": "noise-validate", "noise": {"tau": 0}}, "$.noise.tau"),
        ({"model": {}}, "$.mode"),
        ([], "$"),
    ],
)
def test_config_errors_name_their_path(document, path):
    with pytest.raises(ConfigError) as info:
        parse_config(json.dumps(document))
    assert info.value.path == path
    assert str(info.value).startswith(f"{path}: ")


def test_invalid_json():
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config("{mode: trajectory")


def test_fdr_conflict_propagates():
    document = {
        "mode": "trajectory",
        "model": {"variant": "ColoredNState", "tau": 0.1, "diffusion_d": 1.0, "noise_g": 3.0},
        "initial_populations": [0.5, 0.5],
    }
    with pytest.raises(FDRError) as info:
        parse_config(json.dumps(document))
    assert info.value.context["keys"] == ["diffusion_d", "noise_g"]
    assert info.value.exit_code == 12


def test_mode_argument_fills_a_missing_key():
    assert parse_config("{}", mode="master").mode is Mode.MASTER


def test_fingerprint_ignores_output_directory():
    config = default_config("trajectory")
    assert config.with_overrides(output_dir="elsewhere").fingerprint == config.fingerprint
    assert config.with_overrides(master_seed=1).fingerprint != config.fingerprint


def test_output_directory_precedence(monkeypatch, tmp_path):
    config = default_config("trajectory").with_overrides(output_dir=str(tmp_path / "config"))
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert output_directory(config) == tmp_path / "config"
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert output_directory(config) == tmp_path / "env"
    assert output_directory(config, str(tmp_path / "flag")) == tmp_path / "flag"


def test_master_csv(tmp_path):
    (path,) = execute(default_config("master"), out_dir=str(tmp_path))
    assert path.name == f"master_{default_config('master').fingerprint[:12]}.csv"
    columns, table = read_table(path)
    assert columns[:4] == ["t", "re_rho_00", "im_rho_00", "re_rho_01"]
    assert columns[-1] == "purity"
    t = table[:, 0]
    assert t[-1] == pytest.approx(5.0)
    assert table[:, 3] == pytest.approx(0.5 * np.exp(-t), rel=1e-6)
    assert table[:, 1] == pytest.approx(0.5)


def test_trajectory_outputs(tmp_path):
    csv_path, json_path = execute(default_config("trajectory"), out_dir=str(tmp_path))
    columns, table = read_table(csv_path)
    assert columns == ["t", "pop_0", "pop_1", "norm"]
    assert table[0, :3] == pytest.approx([0.0, 0.8, 0.2])
    assert table[:, 3] == pytest.approx(1.0, abs=1e-9)
    sidecar = json.loads(json_path.read_text())
    assert sidecar["fingerprint"] == default_config("trajectory").fingerprint
    assert sidecar["n_records"] == table.shape[0]


def test_ensemble_outputs(tmp_path):
    config = parse_config(json.dumps({"mode": "ensemble", "m": 24, "master_seed": 3}))
    csv_path, json_path = execute(config, workers=1, out_dir=str(tmp_path))
    columns, table = read_table(csv_path)
    assert columns == ["trajectory_index", "outcome", "collapse_time"]
    assert table[:, 0] == pytest.approx(np.arange(24))
    resolved = table[:, 1] >= 0
    assert np.all(table[resolved, 2] >= 0)
    report = json.loads(json_path.read_text())
    assert report["summary"]["m_trajectories"] == 24
    assert "martingale" in report


def test_reruns_are_byte_identical(tmp_path, run_cli, capsys):
    first, second = tmp_path / "a", tmp_path / "b"
    assert run_cli(capsys, "trajectory", "--seed", "5", "--out", str(first))[0] == 0
    assert run_cli(capsys, "trajectory", "--seed", "5", "--out", str(second))[0] == 0
    names = sorted(path.name for path in first.iterdir())
    assert names == sorted(path.name for path in second.iterdir())
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_main_prints_written_paths(tmp_path, run_cli, capsys):
    code, out, _ = run_cli(capsys, "master", "--out", str(tmp_path))
    assert code == 0
    (line,) = out.splitlines()
    assert line.endswith(".csv")
    assert line.startswith(str(tmp_path))


def test_environment_output_directory(tmp_path, run_cli, capsys, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    code, out, _ = run_cli(capsys, "master")
    assert code == 0
    assert out.strip().startswith(str(tmp_path / "env"))
    code, out, _ = run_cli(capsys, "master", "--out", str(tmp_path / "flag"))
    assert out.strip().startswith(str(tmp_path / "flag"))


def test_config_error_exit(tmp_path, run_cli, capsys, write_config):
    config = write_config({"mode": "trajectory", "model": {"foo": 1}})
    code, out, err = run_cli(capsys, "trajectory", "--config", config, "--out", str(tmp_path))
    assert code == 2
    assert out == ""
    report = json.loads(err.splitlines()[0])
    assert report["error"] == "ConfigError"
    assert report["context"]["path"] == "$.model.foo"
    assert "For full traceback, use -vv" in err


def test_missing_config_file(tmp_path, run_cli, capsys):
    code, _, err = run_cli(capsys, "master", "--config", str(tmp_path / "absent.json"))
    assert code == 2
    assert "cannot read" in err


def test_mode_mismatch(tmp_path, run_cli, capsys, write_config):
    config = write_config({"mode": "ensemble"})
    code, _, err = run_cli(capsys, "trajectory", "--config", config, "--out", str(tmp_path))
    assert code == 2
    assert json.loads(err.splitlines()[0])["context"]["path"] == "$.mode"


def test_fdr_error_exit(tmp_path, run_cli, capsys, write_config):
    config = write_config(
        {
            "mode": "trajectory",
            "model": {"variant": "ColoredNState", "tau": 0.1, "diffusion_d": 1.0, "noise_g": 3.0},
        }
    )
    code, _, err = run_cli(capsys, "trajectory", "--config", config, "--out", str(tmp_path))
    assert code == 12
    assert json.loads(err.splitlines()[0])["context"]["keys"] == ["diffusion_d", "noise_g"]


def test_traceback_with_debug_verbosity(tmp_path, run_cli, capsys, write_config):
    config = write_config({"mode": "trajectory", "m": 0})
    code, _, err = run_cli(capsys, "trajectory", "--config", config, "-vv")
    assert code == 2
    assert "Traceback" in err
    assert "For full traceback" not in err


def test_failed_checks_still_write_the_report(tmp_path, run_cli, capsys, monkeypatch):
    failing = CheckReport("noise-validate[OU]", (CheckRow("variance", "abc", 2.0, 1.0, False),))
    monkeypatch.setattr(cli, "validate_noise", lambda kind, tau, seed: NoiseValidation(kind, tau, failing))
    code, out, err = run_cli(capsys, "noise-validate", "--out", str(tmp_path))
    assert code == 3
    assert out == ""
    assert json.loads(err.splitlines()[0])["context"]["failed"] == ["variance"]
    (written,) = tmp_path.iterdir()
    assert json.loads(written.read_text())["report"]["passed"] is False


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--version"])
    assert info.value.code == 0
    assert capsys.readouterr().out.startswith("collapse-sde ")


def test_subcommand_required(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([])
    assert info.value.code == 2


def test_negative_seed_is_a_config_error(tmp_path, run_cli, capsys):
    code, out, err = run_cli(capsys, "trajectory", "--seed", "-1", "--out", str(tmp_path))
    assert code == 2
    assert out == ""
    assert json.loads(err.splitlines()[0])["context"]["path"] == "$.master_seed"
    assert not list(tmp_path.iterdir())


def test_homogenize_from_an_fdr_model(tmp_path, run_cli, capsys, write_config):
    config = write_config({"mode": "homogenize", "m": 16, "sweep": {"taus": [0.1, 0.05], "time": 0.01}})
    code, _, err = run_cli(capsys, "homogenize", "--config", config, "--workers", "1", "--out", str(tmp_path))
    assert code in (0, 3), err
    (written,) = tmp_path.iterdir()
    payload = json.loads(written.read_text())
    assert payload["dt"] == pytest.approx(5e-4)
    assert payload["diffusion_d"] == pytest.approx(1.0)
    assert len(payload["report"]["checks"]) == 3


@pytest.mark.slow
@pytest.mark.stochastic
def test_homogenize_defaults(tmp_path, run_cli, capsys):
    code, _, err = run_cli(capsys, "homogenize", "--workers", "1", "--out", str(tmp_path))
    assert code == 0, err
    (written,) = tmp_path.iterdir()
    payload = json.loads(written.read_text())
    assert payload["dt"] == pytest.approx(1e-4)
    assert payload["report"]["passed"] is True
