"""Exception hierarchy shared by every module.

Each class carries the process exit code the command line maps it to.
"""


class SemdiffError(Exception):
    exit_code = 1


class ConfigError(SemdiffError, ValueError):
    """Invalid configuration value or combination of values."""

    exit_code = 2


class DimensionError(ConfigError):
    """Array shapes do not agree."""

    exit_code = 2


class ContractError(SemdiffError, ValueError):
    """A precondition of an operation was violated."""

    exit_code = 4


class EmptyForegroundError(ContractError):
    pass


class PackingError(SemdiffError, RuntimeError):
    """Could not place the requested instances without overlap."""

    exit_code = 4


class DatasetIOError(SemdiffError, OSError):
    exit_code = 3
