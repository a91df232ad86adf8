"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/validation problems exit
with 2, I/O and file-format problems with 3, numerical divergence with 4.
"""


class ConfigurationError(ValueError):
    """A shape, hyperparameter, or config file is inconsistent."""


class DatasetFormatError(ValueError):
    """A dataset file does not match the declared binary layout."""

    def __init__(self, message, *, byte_offset=None, record_index=None):
        super().__init__(message)
        self.byte_offset = byte_offset
        self.record_index = record_index


class MissingLatencyError(KeyError):
    """A latency table does not cover a requested operator key."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite or exploding loss/gradient."""
