"""Exception hierarchy shared by all dmllab modules."""


class DmlLabError(Exception):
    """Base class for every error raised by dmllab."""


class InvalidArgumentError(DmlLabError, ValueError):
    """An argument violates a documented precondition."""


class StratificationError(InvalidArgumentError):
    """A stratified partition cannot place every class in every fold."""


class SchemeInfeasibleError(InvalidArgumentError):
    """A tuning scheme cannot run on the given sample (e.g. too few rows)."""


class InvalidModelError(InvalidArgumentError):
    """The causal model does not apply to the data (e.g. IRM with continuous D)."""


class DegenerateDesignError(DmlLabError, ArithmeticError):
    """The treatment residual has (numerically) no variance left."""


class FoldDegenerateError(DmlLabError):
    """A cross-fitting training complement lacks a treatment class."""

    def __init__(self, fold: int, message: str | None = None):
        self.fold = fold
        super().__init__(message or f"training complement of fold {fold} lacks a treatment class")


class UndefinedMetricError(DmlLabError, ArithmeticError):
    """A metric is undefined for the given results (e.g. zero oracle MSE)."""


class CalibrationError(DmlLabError, ArithmeticError):
    """A template constant cannot be solved for its target."""
