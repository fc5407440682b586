"""collapse-sde -- batch front door.

Each mode reads a JSON run configuration, runs one engine and writes its data files as
``<mode>_<fingerprint12>.*`` into the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import enum
import json
import logging
import os
import sys
import time
import traceback
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import TYPE_CHECKING, Any, Final

import numpy as np

from collapse_sde.errors import CheckFailed, ConfigError, SimulationError
from collapse_sde.hilbert import (
    HermitianOperator,
    ProjectorSet,
    StateVector,
    canonical_projectors,
    pure_projector,
)
from collapse_sde.master import MasterConfig, integrate_master
from collapse_sde.models import ModelSpec, Variant, default_dt, derive_fdr_params
from collapse_sde.noise import NoiseKind
from collapse_sde.sde import IntegratorConfig, run_trajectory
from collapse_sde.stats import (
    MAX_UNRESOLVED_FRACTION,
    CheckReport,
    born_check,
    born_suite,
    fingerprint,
    homogenization_sweep,
    martingale_check,
    run_ensemble,
    validate_noise,
)

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    import numpy.typing as npt

log = logging.getLogger(__name__)

OUTPUT_ENV: Final = "COLLAPSE_SDE_OUT"
FINGERPRINT_CHARS: Final = 12
_MISSING: Final = object()


def tool_version() -> str:
    try:
        return metadata.version("collapse-sde")
    except metadata.PackageNotFoundError:
        return "0+unknown"


class Mode(enum.Enum):
    TRAJECTORY = "trajectory"
    ENSEMBLE = "ensemble"
    MASTER = "master"
    NOISE_VALIDATE = "noise-validate"
    HOMOGENIZE = "homogenize"
    BORN_SUITE = "born-suite"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.TWO_STATE_ITO
    dim: int = 2
    #: projector index of each basis state; canonical rank-1 projectors when unset
    labels: tuple[int, ...] | None = None
    script_j: float = 1.0
    n_size: float = 1.0
    hbar: float = 1.0
    diffusion_d: float | None = None
    noise_g: float | None = None
    tau: float | None = None
    noise_kind: NoiseKind = NoiseKind.OU
    #: rows of (re, im) pairs
    hamiltonian: tuple[tuple[tuple[float, float], ...], ...] | None = None
    enforce_fdr: bool = True

    def projectors(self) -> ProjectorSet:
        if self.labels is None:
            return canonical_projectors(self.dim)
        return ProjectorSet.from_labels(self.labels)

    def build(self) -> ModelSpec:
        hamiltonian = None
        if self.hamiltonian is not None:
            rows = [[re + 1j * im for re, im in row] for row in self.hamiltonian]
            hamiltonian = HermitianOperator(np.array(rows))
        spec = ModelSpec(
            self.variant,
            self.projectors(),
            self.script_j,
            self.n_size,
            self.hbar,
            diffusion_d=self.diffusion_d,
            noise_g=self.noise_g,
            tau=self.tau,
            noise_kind=self.noise_kind,
            hamiltonian=hamiltonian,
        )
        return derive_fdr_params(spec) if self.enforce_fdr else spec


@dataclass(frozen=True)
class IntegratorSection:
    #: derived from the model when unset
    dt: float | None = None
    t_max: float = 20.0
    renormalize_each_step: bool = True
    collapse_epsilon: float = 1e-6
    record_stride: int = 1
    checkpoints: tuple[float, ...] = ()
    stop_at_collapse: bool = True

    def build(self) -> IntegratorConfig:
        if self.dt is None:
            raise ConfigError("integrator dt unset", path="$.integrator.dt")
        return IntegratorConfig(**dataclasses.asdict(self))


@dataclass(frozen=True)
class MasterSection:
    dt: float = 1e-3
    t_max: float = 5.0
    record_stride: int = 10

    def build(self) -> MasterConfig:
        return MasterConfig(self.dt, self.t_max, self.record_stride)


@dataclass(frozen=True)
class SweepSection:
    taus: tuple[float, ...] = (0.1, 0.03, 0.01)
    #: comparison time; half a collapse time when unset
    time: float | None = None


@dataclass(frozen=True)
class NoiseSection:
    kind: NoiseKind = NoiseKind.OU
    tau: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    mode: Mode
    model: ModelConfig
    integrator: IntegratorSection
    initial_populations: tuple[float, ...] = (0.8, 0.2)
    initial_phases: tuple[float, ...] | None = None
    master: MasterSection = field(default_factory=MasterSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    m: int = 1000
    master_seed: int = 0
    output_dir: str = "out"

    def spec(self) -> ModelSpec:
        return self.model.build()

    def psi0(self) -> StateVector:
        return StateVector.from_populations(self.initial_populations, self.initial_phases)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        """Canonical form; `parse_config` reads it back to an equal config."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def fingerprint(self) -> str:
        """Hash of everything that determines the results; the output directory is left out."""
        content = self.to_dict()
        del content["output_dir"]
        return fingerprint(content, tool_version())

    def with_overrides(self, master_seed: int | None = None, output_dir: str | None = None) -> RunConfig:
        changes: dict[str, Any] = {}
        if master_seed is not None:
            changes["master_seed"] = master_seed
        if output_dir is not None:
            changes["output_dir"] = output_dir
        return dataclasses.replace(self, **changes)


def _plain(value: Any) -> Any:
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, list | tuple):
        return [_plain(item) for item in value]
    return value


class _Section:
    """Typed reads from one JSON object; `finish` rejects the keys nobody read."""

    def __init__(self, data: object, path: str) -> None:
        if not isinstance(data, dict):
            raise ConfigError("expected an object", path=path)
        self.data = data
        self.path = path
        self.seen: set[str] = set()

    def _raw(self, key: str) -> object:
        self.seen.add(key)
        return self.data.get(key, _MISSING)

    def _at(self, key: str) -> str:
        return f"{self.path}.{key}"

    def number(self, key: str, default: Any = _MISSING) -> Any:
        value = self._raw(key)
        if value is _MISSING or value is None:
            if default is _MISSING:
                raise ConfigError("required number missing", path=self._at(key))
            return default
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"expected a number, got {value!r}", path=self._at(key))
        return float(value)

    def integer(self, key: str, default: int) -> int:
        value = self._raw(key)
        if value is _MISSING:
            return default
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path=self._at(key))
        return value

    def flag(self, key: str, default: bool) -> bool:
        value = self._raw(key)
        if value is _MISSING:
            return default
        if not isinstance(value, bool):
            raise ConfigError(f"expected true or false, got {value!r}", path=self._at(key))
        return value

    def text(self, key: str, default: str) -> str:
        value = self._raw(key)
        if value is _MISSING:
            return default
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path=self._at(key))
        return value

    def choice(self, key: str, kind: type[enum.Enum], default: Any) -> Any:
        value = self._raw(key)
        if value is _MISSING:
            return default
        try:
            return kind(value)
        except ValueError:
            options = ", ".join(str(member.value) for member in kind)
            raise ConfigError(f"expected one of {options}, got {value!r}", path=self._at(key)) from None

    def numbers(self, key: str, default: Any, integral: bool = False) -> Any:
        value = self._raw(key)
        if value is _MISSING or value is None:
            return default
        if not isinstance(value, list):
            raise ConfigError("expected an array", path=self._at(key))
        wanted = int if integral else int | float
        for index, item in enumerate(value):
            if isinstance(item, bool) or not isinstance(item, wanted):
                raise ConfigError(f"expected a number, got {item!r}", path=f"{self._at(key)}[{index}]")
        return tuple(value) if integral else tuple(float(item) for item in value)

    def section(self, key: str) -> _Section:
        value = self._raw(key)
        return _Section({} if value is _MISSING else value, self._at(key))

    def matrix(self, key: str) -> tuple[tuple[tuple[float, float], ...], ...] | None:
        """Complex matrix as rows of numbers or [re, im] pairs."""
        value = self._raw(key)
        if value is _MISSING or value is None:
            return None
        path = self._at(key)
        if not isinstance(value, list) or not all(isinstance(row, list) for row in value):
            raise ConfigError("expected a matrix given as rows", path=path)
        rows = []
        for i, row in enumerate(value):
            entries = []
            for j, entry in enumerate(row):
                if isinstance(entry, int | float) and not isinstance(entry, bool):
                    entries.append((float(entry), 0.0))
                elif (
                    isinstance(entry, list)
                    and len(entry) == 2
                    and all(isinstance(x, int | float) and not isinstance(x, bool) for x in entry)
                ):
                    entries.append((float(entry[0]), float(entry[1])))
                else:
                    raise ConfigError("entries are numbers or [re, im] pairs", path=f"{path}[{i}][{j}]")
            rows.append(tuple(entries))
        return tuple(rows)

    def finish(self) -> None:
        for key in sorted(set(self.data) - self.seen):
            raise ConfigError(f"unknown key {key!r}", path=self._at(key))


def _read_model(section: _Section, defaults: ModelConfig) -> ModelConfig:
    labels = section.numbers("labels", defaults.labels, integral=True)
    model = ModelConfig(
        variant=section.choice("variant", Variant, defaults.variant),
        dim=section.integer("dim", len(labels) if labels else defaults.dim),
        labels=labels,
        script_j=section.number("script_j", defaults.script_j),
        n_size=section.number("n_size", defaults.n_size),
        hbar=section.number("hbar", defaults.hbar),
        diffusion_d=section.number("diffusion_d", defaults.diffusion_d),
        noise_g=section.number("noise_g", defaults.noise_g),
        tau=section.number("tau", defaults.tau),
        noise_kind=section.choice("noise_kind", NoiseKind, defaults.noise_kind),
        hamiltonian=section.matrix("hamiltonian"),
        enforce_fdr=section.flag("enforce_fdr", defaults.enforce_fdr),
    )
    section.finish()
    if labels is not None and len(labels) != model.dim:
        raise ConfigError("labels must give one projector index per basis state", path=section._at("labels"))
    return model


def _default_step(config_mode: Mode, spec: ModelSpec, sweep: SweepSection) -> float:
    if config_mode is Mode.HOMOGENIZE:
        return min(0.01 / spec.collapse_rate, min(sweep.taus) / 10)
    return default_dt(spec)


def parse_config(text: str, mode: Mode | str | None = None) -> RunConfig:
    """Validate a JSON run configuration, filling defaults from `default_config`.

    The mode comes from the ``mode`` key, or from ``mode`` when the document has none. Model
    and integrator parameters are validated by building them, so FDR conflicts surface as the
    `FDRError` that `derive_fdr_params` raises.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON: {err.msg} (line {err.lineno})") from None
    root = _Section(data, "$")
    chosen = root.choice("mode", Mode, None if mode is None else Mode(mode))
    if chosen is None:
        raise ConfigError("mode missing", path="$.mode")
    defaults = _defaults(chosen)

    model = _read_model(root.section("model"), defaults.model)
    populations = root.numbers("initial_populations", defaults.initial_populations)
    phases = root.numbers("initial_phases", defaults.initial_phases)

    sweep_section = root.section("sweep")
    sweep = SweepSection(
        taus=sweep_section.numbers("taus", defaults.sweep.taus),
        time=sweep_section.number("time", defaults.sweep.time),
    )
    sweep_section.finish()

    noise_section = root.section("noise")
    noise = NoiseSection(
        kind=noise_section.choice("kind", NoiseKind, defaults.noise.kind),
        tau=noise_section.number("tau", defaults.noise.tau),
    )
    noise_section.finish()

    master_section = root.section("master")
    master = MasterSection(
        dt=master_section.number("dt", defaults.master.dt),
        t_max=master_section.number("t_max", defaults.master.t_max),
        record_stride=master_section.integer("record_stride", defaults.master.record_stride),
    )
    master_section.finish()

    spec = model.build()
    base = defaults.integrator
    section = root.section("integrator")
    integrator = IntegratorSection(
        dt=section.number("dt", base.dt),
        t_max=section.number("t_max", base.t_max),
        renormalize_each_step=section.flag("renormalize_each_step", base.renormalize_each_step),
        collapse_epsilon=section.number("collapse_epsilon", base.collapse_epsilon),
        record_stride=section.integer("record_stride", base.record_stride),
        checkpoints=section.numbers("checkpoints", base.checkpoints),
        stop_at_collapse=section.flag("stop_at_collapse", base.stop_at_collapse),
    )
    section.finish()
    if integrator.dt is None:
        integrator = dataclasses.replace(integrator, dt=_default_step(chosen, spec, sweep))

    config = RunConfig(
        mode=chosen,
        model=model,
        integrator=integrator,
        initial_populations=populations,
        initial_phases=phases,
        master=master,
        sweep=sweep,
        noise=noise,
        m=root.integer("m", defaults.m),
        master_seed=root.integer("master_seed", defaults.master_seed),
        output_dir=root.text("output_dir", defaults.output_dir),
    )
    root.finish()
    _validate(config, spec)
    return config


def _validate(config: RunConfig, spec: ModelSpec) -> None:
    """Build every engine input once so that invalid values fail before any work starts."""
    for key, section in (("integrator", config.integrator), ("master", config.master)):
        try:
            section.build()
        except ConfigError:
            raise
        except SimulationError as err:
            raise ConfigError(err.message, path=f"$.{key}", **err.context) from err
    if config.initial_phases is not None and len(config.initial_phases) != len(config.initial_populations):
        raise ConfigError("one phase per amplitude expected", path="$.initial_phases")
    psi0 = config.psi0()
    if psi0.dim != spec.dim:
        raise ConfigError(
            f"initial state has {psi0.dim} amplitudes, the model {spec.dim}", path="$.initial_populations"
        )
    if config.m < 1:
        raise ConfigError("m must be at least 1", path="$.m")
    if not 0 <= config.master_seed < 1 << 64:
        raise ConfigError("master_seed must be an unsigned 64-bit integer", path="$.master_seed")
    if config.mode is Mode.HOMOGENIZE and not spec.variant.is_colored:
        raise ConfigError("homogenize needs the ColoredNState variant", path="$.model.variant")
    if config.mode is Mode.NOISE_VALIDATE and not config.noise.tau > 0:
        raise ConfigError("noise tau must be positive", path="$.noise.tau")


def default_config(mode: Mode | str) -> RunConfig:
    """Validated defaults of a mode, with dt derived from the default model."""
    return parse_config(json.dumps({"mode": Mode(mode).value}))


def _defaults(mode: Mode) -> RunConfig:
    """Defaults per mode in units ħ = 𝒥 = 𝒩 = 1, so one collapse time is one time unit."""
    two_state = ModelConfig()
    integrator = IntegratorSection()
    if mode is Mode.ENSEMBLE:
        return RunConfig(mode, two_state, dataclasses.replace(integrator, checkpoints=(0.25, 0.5, 1.0)))
    if mode is Mode.MASTER:
        return RunConfig(mode, two_state, integrator, initial_populations=(0.5, 0.5))
    if mode is Mode.HOMOGENIZE:
        colored = ModelConfig(variant=Variant.COLORED_N_STATE, tau=0.1)
        return RunConfig(mode, colored, integrator, initial_populations=(0.7, 0.3), m=2000)
    if mode is Mode.BORN_SUITE:
        return RunConfig(mode, two_state, IntegratorSection(dt=2e-3), m=5000)
    return RunConfig(mode, two_state, integrator)


# ---------------------------------------------------------------------------
# execution


@dataclass
class _Outputs:
    directory: Path
    stem: str
    fingerprint: str
    written: list[Path] = field(default_factory=list)

    def _path(self, suffix: str) -> Path:
        path = self.directory / f"{self.stem}{suffix}"
        self.written.append(path)
        return path

    def json(self, payload: dict[str, Any], suffix: str = ".json") -> Path:
        path = self._path(suffix)
        body = {"fingerprint": self.fingerprint, "version": tool_version(), **payload}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path

    def csv(self, columns: Sequence[str], table: npt.ArrayLike, suffix: str = ".csv") -> Path:
        path = self._path(suffix)
        with path.open("w") as stream:
            stream.write(f"# collapse-sde {tool_version()}\n# fingerprint {self.fingerprint}\n")
            stream.write(",".join(columns) + "\n")
            np.savetxt(stream, np.asarray(table, dtype=np.float64), delimiter=",", fmt="%.17g")
        return path


def output_directory(config: RunConfig, override: str | None = None) -> Path:
    """``--out`` wins over ``$COLLAPSE_SDE_OUT``, which wins over the config's ``output_dir``."""
    return Path(override or os.environ.get(OUTPUT_ENV) or config.output_dir)


def _run_trajectory(config: RunConfig, out: _Outputs, workers: int | None) -> None:
    record = run_trajectory(config.spec(), config.psi0(), config.integrator.build(), 0, config.master_seed)
    n_projectors = record.populations.shape[1]
    columns = ["t", *(f"pop_{k}" for k in range(n_projectors)), "norm"]
    out.csv(columns, np.column_stack([record.times, record.populations, record.norms]))
    out.json(record.sidecar())


def _run_ensemble(config: RunConfig, out: _Outputs, workers: int | None) -> None:
    psi0 = config.psi0()
    summary = run_ensemble(config.spec(), psi0, config.integrator.build(), config.m, config.master_seed, workers)
    collapse_times = np.where(np.isnan(summary.collapse_times), -1.0, summary.collapse_times)
    out.csv(
        ["trajectory_index", "outcome", "collapse_time"],
        np.column_stack([np.arange(summary.m_trajectories), summary.outcomes, collapse_times]),
    )
    payload: dict[str, Any] = {"summary": summary.to_dict()}
    if summary.unresolved_count / summary.m_trajectories < MAX_UNRESOLVED_FRACTION:
        payload["born"] = born_check(summary, psi0).to_dict()
    if summary.checkpoint_times.size:
        payload["martingale"] = martingale_check(summary, psi0).to_dict()
    out.json(payload)


def _run_master(config: RunConfig, out: _Outputs, workers: int | None) -> None:
    solution = integrate_master(config.spec(), pure_projector(config.psi0()), config.master.build())
    out.csv(solution.columns(), solution.table())


def _require(report: CheckReport) -> None:
    if not report.passed:
        names = [row.name for row in report.failures()]
        raise CheckFailed(f"{report.name}: {len(names)} check(s) failed", failed=names)


def _run_noise_validate(config: RunConfig, out: _Outputs, workers: int | None) -> None:
    validation = validate_noise(config.noise.kind, config.noise.tau, config.master_seed)
    out.json({"report": validation.report.to_dict()})
    _require(validation.report)


def _run_homogenize(config: RunConfig, out: _Outputs, workers: int | None) -> None:
    result = homogenization_sweep(
        config.spec(),
        config.psi0(),
        config.sweep.taus,
        config.integrator.build(),
        config.m,
        config.master_seed,
        workers,
        config.sweep.time,
    )
    report = result.report()
    out.json(
        {"report": report.to_dict(), "time": result.time, "dt": result.dt, "diffusion_d": result.diffusion_d}
    )
    _require(report)


def _run_born_suite(config: RunConfig, out: _Outputs, workers: int | None) -> None:
    report = born_suite(config.master_seed, config.m, config.integrator.dt, config.integrator.t_max, workers)
    out.json({"report": report.to_dict()})
    _require(report)


_RUNNERS: Final[dict[Mode, Callable[[RunConfig, _Outputs, int | None], None]]] = {
    Mode.TRAJECTORY: _run_trajectory,
    Mode.ENSEMBLE: _run_ensemble,
    Mode.MASTER: _run_master,
    Mode.NOISE_VALIDATE: _run_noise_validate,
    Mode.HOMOGENIZE: _run_homogenize,
    Mode.BORN_SUITE: _run_born_suite,
}


def execute(config: RunConfig, workers: int | None = None, out_dir: str | None = None) -> list[Path]:
    """Run ``config`` and return the files written.

    Engine errors propagate as `SimulationError`; after writing its report a failed check
    suite raises `CheckFailed`.
    """
    directory = output_directory(config, out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"{config.mode.value}_{config.fingerprint[:FINGERPRINT_CHARS]}"
    outputs = _Outputs(directory, stem, config.fingerprint)
    started = time.perf_counter()
    try:
        _RUNNERS[config.mode](config, outputs, workers)
    finally:
        log.info("%s finished in %.2fs", config.mode.value, time.perf_counter() - started)
    return outputs.written


# ---------------------------------------------------------------------------
# command line


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration; mode defaults otherwise")
    common.add_argument("--seed", type=int, metavar="U64", help="Override the master seed")
    common.add_argument(
        "--workers", type=int, metavar="N", help="Worker processes (default: available CPUs); 1 runs serially"
    )
    common.add_argument("--out", metavar="DIR", help=f"Output directory (overrides ${OUTPUT_ENV})")
    common.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Log progress; repeat for debug output and tracebacks",
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collapse-sde", description="Collapse-model stochastic Schrödinger equation simulator"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    commands = parser.add_subparsers(dest="mode", required=True, metavar="MODE")
    common = _common_flags()
    helps = {
        Mode.TRAJECTORY: "Integrate one trajectory and dump its populations",
        Mode.ENSEMBLE: "Run an ensemble and report outcome counts",
        Mode.MASTER: "Integrate the averaged master equation",
        Mode.NOISE_VALIDATE: "Check a colored-noise generator against its analytic statistics",
        Mode.HOMOGENIZE: "Compare colored-noise laws with the white-noise limit over a tau sweep",
        Mode.BORN_SUITE: "Run the Born-rule acceptance checks",
    }
    for mode, text in helps.items():
        commands.add_parser(mode.value, parents=[common], help=text, description=text)
    return parser


def _configure_logging(verbose: int) -> None:
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s [%(levelname)8s] %(name)s: %(message)s")


def _load(args: argparse.Namespace) -> RunConfig:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read {args.config}: {err.strerror}") from None
        config = parse_config(text, args.mode)
        if config.mode.value != args.mode:
            raise ConfigError(f"config is for mode {config.mode.value!r}", path="$.mode")
    else:
        config = parse_config(json.dumps({"mode": args.mode}))
    if args.seed is None:
        return config
    config = config.with_overrides(master_seed=args.seed)
    _validate(config, config.spec())
    return config


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        config = _load(args)
        written = execute(config, workers=args.workers, out_dir=args.out)
    except SimulationError as err:
        if args.verbose >= 2:
            traceback.print_exception(err)
        sys.stderr.write(json.dumps(err.to_dict(), sort_keys=True) + "\n")
        if args.verbose < 2:
            sys.stderr.write("For full traceback, use -vv\n")
        return err.exit_code
    for path in written:
        print(path)
    return 0
