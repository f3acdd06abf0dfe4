"""Exception hierarchy shared across the package."""


class HmmfolioError(Exception):
    """Base class for all package errors."""


class InputError(HmmfolioError):
    """Malformed or inconsistent user input (bad shapes, dt <= 0, misaligned paths)."""


class ModelError(HmmfolioError):
    """Model parameters violate their invariants (non-PD covariance, bad generator)."""


class FilterDegenerateError(HmmfolioError):
    """Observation grossly inconsistent with the model scale; filter weights degenerate."""


class SingularPenaltyError(HmmfolioError):
    """The penalty-weighted matrix A is not positive definite."""


class DecompositionUnavailableError(HmmfolioError):
    """GOP/benchmark/MQP decomposition requires Omega = Q = covariance."""


class EstimationError(HmmfolioError):
    """EM failed to produce a usable parameter set."""


class GeneratorFitError(HmmfolioError):
    """Nearest-generator optimization failed to converge.

    Carries the best iterate found so far in ``best_generator`` and its
    Frobenius objective in ``objective``.
    """

    def __init__(self, message, best_generator=None, objective=None):
        super().__init__(message)
        self.best_generator = best_generator
        self.objective = objective
