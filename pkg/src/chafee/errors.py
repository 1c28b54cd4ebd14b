"""Exception hierarchy shared by all modules."""


class ChafeeError(Exception):
    """Base class for every error raised by this package."""


class InvalidGridError(ChafeeError, ValueError):
    pass


class DimensionError(ChafeeError, ValueError):
    pass


class TruncationError(ChafeeError, ValueError):
    pass


class NumericalError(ChafeeError, ArithmeticError):
    """Eigen-solver or linear-algebra failure.

    ``index`` carries the offending eigenvalue / pivot index when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateInputError(ChafeeError, ValueError):
    pass


class ParameterError(ChafeeError, ValueError):
    pass


class StepError(ChafeeError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class BlowUpError(StepError):
    pass


class DivergenceDomainError(ChafeeError, ValueError):
    pass


class EstimatorError(ChafeeError, ValueError):
    pass


class FitError(ChafeeError, ValueError):
    pass


class ScopeError(ChafeeError, ValueError):
    pass


class AlignmentError(ChafeeError, ValueError):
    pass


class DegenerateBundleError(ChafeeError, ArithmeticError):
    pass


class ConfigError(ChafeeError, ValueError):
    """Aggregated configuration problems; ``problems`` lists every violation."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
