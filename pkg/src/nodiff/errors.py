"""Exception hierarchy.

Every error carries the name of the component that raised it so the CLI can
report provenance.
"""

from __future__ import annotations


class NoDiffError(Exception):
    component = "nodiff"

    def __init__(self, message: str, *, component: str | None = None):
        super().__init__(message)
        if component is not None:
            self.component = component

    def __str__(self) -> str:
        return f"[{self.component}] {super().__str__()}"


class StructuralError(NoDiffError, ValueError):
    """Shapes or layouts that do not fit together."""


class ConfigError(NoDiffError, ValueError):
    """Invalid configuration value or range."""


class ContractError(NoDiffError, ValueError):
    """A precondition of an operation was violated by the caller."""


class NumericError(NoDiffError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class TrainingError(NumericError):
    """Training could not continue; may carry the last good parameters."""

    def __init__(self, message: str, *, component: str | None = None, breakdown=None, last_good=None):
        super().__init__(message, component=component)
        self.breakdown = breakdown
        self.last_good = last_good


class OracleError(NumericError):
    pass


class DataError(NoDiffError, ValueError):
    pass


class EpisodeError(NoDiffError, ValueError):
    pass


class GenerationError(NoDiffError, RuntimeError):
    pass


class ArtifactIOError(NoDiffError, OSError):
    pass
