from __future__ import annotations

from typing import Optional


class SwindleError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code: int = 1


class ContractViolationError(SwindleError, ValueError):
    """A caller broke a precondition (shapes, dimensions, ranges)."""


class ConfigError(SwindleError):
    """Configuration is missing, inconsistent or refers to absent inputs."""


class SchemaError(SwindleError):
    """A dataset file does not have the documented layout."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DatasetParseError(SchemaError):
    """A dataset row could not be parsed."""

    def __init__(self, message: str, line: int) -> None:
        super().__init__(message, line=line)


class NumericalError(SwindleError):
    exit_code = 2


class DivergenceError(NumericalError):
    """Leapfrog integration produced a non-finite state."""

    def __init__(self, step: int, message: str = "non-finite state") -> None:
        self.step = step
        super().__init__(f"divergence at leapfrog step {step}: {message}")


class VIDivergenceError(NumericalError):
    """The ELBO estimate became non-finite during fitting."""

    def __init__(self, step: int, value: float) -> None:
        self.step = step
        self.value = value
        super().__init__(f"non-finite ELBO ({value}) at optimization step {step}")


class InsufficientDataError(NumericalError):
    pass


class UndefinedEssError(NumericalError):
    """ESS requested for a chain with zero variance."""


class InsufficientChainsError(NumericalError):
    pass
