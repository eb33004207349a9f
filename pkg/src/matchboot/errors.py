"""Exception hierarchy.

Everything the CLI treats as a usage/validation problem (exit code 2) derives
from :class:`MatchbootError`.
"""


class MatchbootError(ValueError):
    pass


class SchemaError(MatchbootError):
    """A required column is missing or the header is unusable."""


class ValidationError(MatchbootError):
    """A value failed validation; ``row`` is the 1-based data row, if known."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DegenerateGroupError(MatchbootError):
    """One of the treatment groups is empty."""


class InfeasibleMError(MatchbootError):
    """The requested number of matches exceeds a group size."""


class UnderdeterminedFitError(MatchbootError):
    """Fewer observations than basis functions in a regression fit."""


class ConfigError(MatchbootError):
    """Malformed experiment or CLI configuration."""
