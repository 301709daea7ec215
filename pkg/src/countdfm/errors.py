"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CountDFMError(Exception):
    """Base class for all package errors."""


class ParameterError(CountDFMError, ValueError):
    """Invalid distribution or model parameters."""


class DomainError(CountDFMError, ValueError):
    """Argument outside the domain of a function."""


class DegenerateMarginalError(CountDFMError, ValueError):
    """A series carries no information about its marginal (e.g. constant at a support boundary)."""


class DegenerateSeriesError(CountDFMError, ValueError):
    """A constant column makes correlations undefined."""


class FoldDegeneracyError(DegenerateSeriesError):
    def __init__(self, fold: int, column: int, kind: str = "test"):
        self.fold = fold
        self.column = column
        self.kind = kind
        super().__init__(f"{kind} data of fold {fold} has a constant column {column}")


class LinkMonotonicityError(CountDFMError, ValueError):
    """Link function values on the inversion grid are not strictly increasing."""


class RankError(CountDFMError, ValueError):
    """Too few positive eigenvalues for the requested number of factors."""


class IdentifiabilityError(CountDFMError, ValueError):
    """Top block of the loadings is singular or not the identity."""


class StabilityError(CountDFMError, ValueError):
    """VAR companion matrix has spectral radius >= 1."""


class NumericError(CountDFMError, ArithmeticError):
    """A numerical routine failed (singular or non-PSD matrix, underflow, ...)."""


class NearSingularToeplitzError(NumericError):
    def __init__(self, cond: float):
        self.cond = cond
        super().__init__(f"block Toeplitz system is near singular (condition number {cond:.3e})")


class WeightDegeneracyError(NumericError):
    """All particle weights vanished."""


class DataFormatError(CountDFMError, ValueError):
    """Malformed input file."""


class FitError(CountDFMError):
    """Failure inside the estimation pipeline, tagged with the stage that raised."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


class DegenerateBinError(NumericError):
    """A latent box is numerically empty."""
