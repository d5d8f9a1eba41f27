"""Exception types shared across the package.

Each carries the process exit code the CLI maps it to.
"""


class OcformerError(Exception):
    exit_code = 1


class ConfigError(OcformerError, ValueError):
    """Invalid configuration, dimensions or inputs."""

    exit_code = 2


class InvalidMeasureError(ConfigError):
    """A measure whose masses are negative or do not sum to one."""


class BudgetError(OcformerError, RuntimeError):
    """The reachable-state budget of the dynamic program was exceeded."""

    exit_code = 3

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class ConsistencyError(OcformerError, RuntimeError):
    """Internal bookkeeping of the dynamic program is inconsistent."""
