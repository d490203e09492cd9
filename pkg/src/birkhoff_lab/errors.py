"""Exception types shared across the package.

Each one maps to a process exit code used by the command-line runner.
"""


class LabError(Exception):
    exit_code = 1


class ConfigError(LabError, ValueError):
    exit_code = 2


class NearResonanceError(LabError, ArithmeticError):
    """A divisor that should be inverted is too close to zero."""

    exit_code = 3

    def __init__(self, message, key=None, divisor=None):
        super().__init__(message)
        self.key = key
        self.divisor = divisor


class BudgetExceeded(LabError, RuntimeError):
    exit_code = 4

    def __init__(self, message, estimate=None, budget=None):
        super().__init__(message)
        self.estimate = estimate
        self.budget = budget


class ConvergenceError(LabError, RuntimeError):
    exit_code = 5
