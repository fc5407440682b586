"""Exception hierarchy shared by every engine module.

Each class carries the exit code the command line maps it to, so a failure deep inside a
worker process surfaces with the same code and context it was raised with.
"""

from __future__ import annotations

from typing import Any, ClassVar


class SimulationError(Exception):
    """Base class for every error raised by `collapse_sde`."""

    #: process exit code used by the command line
    exit_code: ClassVar[int] = 1

    def __init__(self, message: str, **context: Any) -> None:
        super().__init__(message)
        self.message = message
        self.context = context

    def __reduce__(self) -> tuple[Any, ...]:
        # keyword context does not survive the default pickling used by process pools
        return (_rebuild, (type(self), self.message, self.context))

    def to_dict(self) -> dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
            "context": {key: _jsonable(value) for key, value in self.context.items()},
        }


def _rebuild(cls: type[SimulationError], message: str, context: dict[str, Any]) -> SimulationError:
    return cls(message, **context)


def _jsonable(value: Any) -> Any:
    if isinstance(value, str | int | float | bool) or value is None:
        return value
    if isinstance(value, list | tuple):
        return [_jsonable(item) for item in value]
    return repr(value)


class ConfigError(SimulationError):
    exit_code = 2

    def __init__(self, message: str, path: str = "$", **context: Any) -> None:
        super().__init__(f"{path}: {message}", path=path, **context)
        self.path = path

    def __reduce__(self) -> tuple[Any, ...]:
        context = dict(self.context)
        path = context.pop("path", "$")
        message = self.message.removeprefix(f"{path}: ")
        return (_rebuild_config, (type(self), message, path, context))


def _rebuild_config(
    cls: type[ConfigError], message: str, path: str, context: dict[str, Any]
) -> ConfigError:
    return cls(message, path=path, **context)


class CheckFailed(SimulationError):
    """A verification report finished but at least one check did not pass."""

    exit_code = 3


class HilbertError(SimulationError):
    exit_code = 10


class ModelError(SimulationError):
    exit_code = 11


class FDRError(ModelError):
    exit_code = 12


class NoiseError(SimulationError):
    exit_code = 13


class IntegrationError(SimulationError):
    exit_code = 14


class TrajectoryError(IntegrationError):
    """Non-finite state; `context` holds the step index, trajectory index and master seed."""

    exit_code = 15


class MasterError(SimulationError):
    exit_code = 16


class StatisticsError(SimulationError):
    exit_code = 17
