"""Error taxonomy shared by the library and the CLI exit codes."""


class UsageError(Exception):
    """Bad flags, impossible argument combinations. CLI exit code 2."""


class DataError(Exception):
    """Malformed or missing input data. CLI exit code 3."""


class NumericError(Exception):
    """Non-finite values or numeric breakdown. CLI exit code 4."""


class InfeasibleConfigError(DataError):
    """A scene config that cannot be satisfied (e.g. instances won't fit)."""
