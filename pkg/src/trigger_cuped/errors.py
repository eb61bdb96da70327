"""Exception hierarchy.

Validation problems (bad input, wrong mode) derive from ``DataValidationError``;
solver failures (separation, infeasible balance, singular designs) derive from
``NumericalError``. The CLI maps the two families to exit codes 1 and 2.
"""


class DataValidationError(ValueError):
    pass


class ModeError(DataValidationError):
    """An estimator was called on data with the wrong trigger labelling."""


class NumericalError(ArithmeticError):
    #: set by the bootstrap engine when the failure happened inside a resample
    resample_index: int | None = None


class SeparationError(NumericalError):
    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


class RankDeficientError(NumericalError):
    pass


class InfeasibleBalanceError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass
