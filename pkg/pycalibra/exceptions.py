"""Custom exception classes"""

from typing import Sequence


class CalibraError(Exception):
    """Base class of every error raised by pycalibra"""


class DomainError(CalibraError, ValueError):
    """Input outside the domain of a numerical routine (non-finite values, empty weights)"""
class DimensionError(CalibraError, ValueError):
    """Array shapes do not agree"""
class BracketError(CalibraError, ValueError):
    """The root bracket does not contain a sign change"""


class QPInfeasibleError(CalibraError, ValueError):
    """The quadratic program has an empty feasible region"""

    family: str
    """Name of the first constraint family that made the region empty"""

    def __init__(self, family: str, message: str = ""):
        self.family = family
        super().__init__(message or f"infeasible constraints: {family}")


class CalibrationInfeasibleError(CalibraError, RuntimeError):
    """No weights satisfy the balance constraints (hull violation, collinearity or divergence)"""

    imbalance: Sequence[float]
    """Imbalance vector D at the last iterate"""

    def __init__(self, message: str, imbalance: Sequence[float] = ()):
        self.imbalance = list(imbalance)
        super().__init__(message)


class MissingSummaryError(CalibraError, KeyError):
    """A target summary required by the estimand or variance method is absent"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing target summary"
class MissingArmError(CalibraError, ValueError):
    """Arm labels are absent or one of the compared arms is empty"""


class SingularFitError(CalibraError, ArithmeticError):
    """The regression design matrix is rank deficient"""
class SingularSandwichError(CalibraError, ArithmeticError):
    """The sandwich bread matrix A is singular"""
class EstimatingEquationError(CalibraError, ArithmeticError):
    """The estimating equations do not hold at the supplied weights"""
class BootstrapFailedError(CalibraError, RuntimeError):
    """Every bootstrap replicate failed to calibrate"""


class InputParseError(CalibraError, ValueError):
    """An input file could not be parsed"""

    line: int | None
    """1-based line number of the offending row, if known"""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"{message} (line {line})" if line is not None else message)
