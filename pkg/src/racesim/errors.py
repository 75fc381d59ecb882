"""Exception types and stack error codes shared across the simulator."""

from __future__ import annotations

from enum import IntEnum


class RaceSimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(RaceSimError):
    """Invalid scenario, node or fault configuration detected at startup."""


class ProjectionError(RaceSimError):
    """A Cartesian point could not be projected onto a reference line."""


class InitializationError(RaceSimError):
    """The vehicle could not be spawned at the requested pose."""


class LogFormatError(RaceSimError):
    """A stored run log is missing or cannot be parsed."""


class Severity(IntEnum):
    WARNING = 0
    FATAL = 1


class ErrorCode(IntEnum):
    CALLBACK_EXCEPTION = 1
    LOC_WATCHDOG = 10
    LOC_SOURCE_BANNED = 11
    COVARIANCE_EXCEEDED = 20
    PLANNER_NO_FEASIBLE_OFFSET = 30
    INJECTED = 90


ERROR_DESCRIPTIONS = {
    ErrorCode.CALLBACK_EXCEPTION: "node callback raised an exception",
    ErrorCode.LOC_WATCHDOG: "localization input watchdog expired",
    ErrorCode.LOC_SOURCE_BANNED: "localization banned a measurement source",
    ErrorCode.COVARIANCE_EXCEEDED: "localization covariance above safety threshold",
    ErrorCode.PLANNER_NO_FEASIBLE_OFFSET: "no feasible overtake offset, following",
    ErrorCode.INJECTED: "error injected by scenario",
}
