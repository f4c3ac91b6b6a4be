"""
Exception hierarchy for the hyperbolic discounting identification lab.

Configuration and usage problems derive from ConfigError (a ValueError);
numerical failures derive from NumericalError (a RuntimeError). The CLI maps
the first family to exit status 2 and the second to exit status 1.
"""

from typing import Optional, Tuple


class HyperbolicLabError(Exception):
    """Root of every error raised by this package."""


class ConfigError(HyperbolicLabError, ValueError):
    """Invalid input, configuration or usage."""


class NumericalError(HyperbolicLabError, RuntimeError):
    """A computation did not produce a usable result."""


class DimensionError(ConfigError):
    pass


class RowSumError(ConfigError):
    def __init__(self, choice: int, state: int, total: float):
        self.choice = choice
        self.state = state
        self.total = total
        super().__init__(
            f"transition row (choice={choice}, state={state}) sums to {total:.12g}, expected 1"
        )


class DomainError(ConfigError):
    pass


class EmptyCell(ConfigError):
    def __init__(self, choice: int, state: int, kind: str = "choice"):
        self.choice = choice
        self.state = state
        self.kind = kind
        super().__init__(f"no {kind} observations in cell (choice={choice}, state={state})")


class LogDomainError(ConfigError):
    pass


class NoConvergence(NumericalError):
    def __init__(self, residual: float, iterations: int, tol: float):
        self.residual = residual
        self.iterations = iterations
        self.tol = tol
        super().__init__(
            f"fixed point did not converge: residual {residual:.3e} > tol {tol:.1e} "
            f"after {iterations} iterations"
        )


class SingularSystem(NumericalError):
    pass


class DegenerateRestriction(NumericalError):
    def __init__(self, message: str, restriction: Optional[Tuple[int, int, int, int]] = None):
        self.restriction = restriction
        super().__init__(message)


class NoSolutionFound(NumericalError):
    def __init__(self, min_residual: float):
        self.min_residual = min_residual
        super().__init__(f"no solution found; smallest residual {min_residual:.3e}")
