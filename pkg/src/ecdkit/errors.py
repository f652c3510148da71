"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
InvariantError -> 3. Library code raises the most specific subclass it can.
"""


class EcdkitError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(EcdkitError):
    """Bad user-supplied settings: out-of-range knobs, malformed flags."""


class ConfigError(UsageError):
    """Invalid model or decoding configuration; message names the violated rule."""


class DataError(EcdkitError):
    """Missing, truncated, or inconsistent input data or artifact files."""


class CheckpointError(DataError):
    """Checkpoint or detector file does not match its declared layout."""


class MetricUndefinedError(DataError):
    """A requested metric has no defined value on the given inputs."""


class InvariantError(EcdkitError):
    """An internal consistency check failed; indicates a bug, not bad input."""
