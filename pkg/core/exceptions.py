"""
Error hierarchy for vctest.

Every error raised on purpose by the library derives from VCTestError so the
CLI can map families of failures onto exit codes.
"""

from typing import Any, Optional


class VCTestError(Exception):
    """Base class for all library errors."""


class ConfigurationError(VCTestError):
    """Invalid configuration, test specification or scenario."""


class SchemaError(ConfigurationError):
    """Dataset or CSV does not match the expected schema."""

    def __init__(self, message: str, column: Optional[str] = None):
        super().__init__(message)
        self.column = column


class EvaluationError(VCTestError):
    """A mean function returned a non-finite value."""

    def __init__(
        self,
        message: str,
        x: Any = None,
        beta: Any = None,
        s: Any = None,
        individual_id: Optional[str] = None,
    ):
        super().__init__(message)
        self.x = x
        self.beta = beta
        self.s = s
        self.individual_id = individual_id


class QuadratureError(EvaluationError):
    """Numerical integration failed or was refused."""


class EstimationError(VCTestError):
    """Maximum likelihood estimation failed on every start."""
