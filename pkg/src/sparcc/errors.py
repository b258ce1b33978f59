"""Exception hierarchy shared by every module.

Each class carries a ``category`` used by the command line to pick an
exit code and a short remediation hint.
"""

from __future__ import annotations


class SparccError(Exception):
    category = "error"
    hint = ""


class InputError(SparccError):
    """Problems with user-supplied data or arguments (exit code 2)."""

    category = "input"


class SchemaError(InputError):
    category = "schema"
    hint = "the CSV header must contain y, w, delta and z"


class ParseError(InputError):
    category = "parse"

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class EmptyDatasetError(InputError):
    category = "empty-dataset"
    hint = "supply at least one record with delta = 1"


class DomainError(InputError):
    category = "domain"


class PreconditionError(InputError):
    category = "precondition"


class UnknownLevelError(InputError):
    category = "unknown-level"
    hint = "z must take one of the levels seen when the nuisance model was fit"


class NumericalError(SparccError):
    """Numerical trouble that is not obviously the user's fault."""

    category = "numerical"


class ConvergenceError(NumericalError):
    category = "non-convergence"
    hint = "try a different starting value or raise --max-iter"

    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = list(trace or [])


class TailSupportError(NumericalError):
    category = "tail-support"
    hint = "raise the grid upper bound so a node lies above every censored w"

    def __init__(self, message: str, record: int | None = None):
        super().__init__(message)
        self.record = record


class ConditioningError(NumericalError):
    category = "conditioning"


class DegenerateGridError(NumericalError):
    category = "degenerate-grid"
    hint = "the covariate density vanishes on every node; widen the grid support"


class SingularSystemError(NumericalError):
    category = "singular-system"

    def __init__(self, message: str, condition: float = float("nan")):
        super().__init__(message)
        self.condition = condition


class ExtrapolationError(NumericalError):
    category = "extrapolation"
    hint = "the grid must bracket every uncensored w"


class CalibrationError(NumericalError):
    category = "calibration"
    hint = "the requested censoring proportion is outside the reachable range"
