"""Exception hierarchy shared by all orthoseg modules.

Each class maps to a process exit code when raised inside a CLI command.
"""


class OrthosegError(Exception):
    """Base class; exit code 1 unless a subclass overrides it."""

    exit_code = 1


class ConfigurationError(OrthosegError):
    """Invalid shapes, geometry or configuration values (usage error)."""

    exit_code = 2


class DataError(OrthosegError):
    """Malformed or out-of-range input data."""

    exit_code = 3


class NumericalError(OrthosegError):
    """Non-finite values or failed numerical contracts."""

    exit_code = 4
