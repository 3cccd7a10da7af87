"""Exception hierarchy shared by the library, the CLI and the API.

``exit_code`` is what the CLI returns when the error escapes a subcommand:
2 for anything detected while validating inputs, 3 for failures at runtime.
"""

from __future__ import annotations

__all__ = (
    "RandPruneError",
    "NetworkParseError",
    "InfeasiblePlanError",
    "PlanMismatchError",
    "DatasetError",
    "ConfigError",
    "SaliencyError",
    "ArtifactError",
    "RunFailure",
)


class RandPruneError(Exception):
    exit_code = 3


class NetworkParseError(RandPruneError, ValueError):
    exit_code = 2


class InfeasiblePlanError(RandPruneError, ValueError):
    exit_code = 2


class PlanMismatchError(RandPruneError, ValueError):
    exit_code = 2


class DatasetError(RandPruneError, ValueError):
    exit_code = 2


class ConfigError(RandPruneError, ValueError):
    exit_code = 2


class SaliencyError(RandPruneError):
    pass


class ArtifactError(RandPruneError):
    pass


class RunFailure(RandPruneError):
    pass
