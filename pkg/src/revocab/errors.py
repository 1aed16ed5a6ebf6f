"""Exception hierarchy shared across the pipeline.

The CLI maps these onto process exit codes: ConfigError -> 1,
ValidationError -> 2, NumericalError -> 3.
"""


class RevocabError(Exception):
    """Base class for all package errors."""


class ConfigError(RevocabError):
    """Bad user input: malformed config, unknown flag values, missing files."""


class ValidationError(RevocabError):
    """An artifact or invariant check failed (corrupt file, stage run out of order)."""


class NumericalError(RevocabError):
    """Training aborted on NaN/Inf loss or gradients."""
