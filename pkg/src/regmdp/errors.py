"""Exception types raised across the package."""


class RegMDPError(Exception):
    """Base class for all package errors."""


class ValidationError(RegMDPError, ValueError):
    pass


class NonStochasticRowError(ValidationError):
    pass


class NegativeRewardError(ValidationError):
    pass


class DiscountOutOfRangeError(ValidationError):
    pass


class SupportTooLargeError(ValidationError):
    pass


class DimensionMismatchError(ValidationError):
    pass


class NonPositivePolicyEntryError(ValidationError):
    pass


class NonPositiveTauError(ValidationError):
    pass


class NonPositiveDualError(ValidationError):
    pass


class NonPositiveValueError(ValidationError):
    """The quadratic dual needs K^{-T} v* > 0, i.e. nonnegative rewards upstream."""


class COutOfRangeError(ValidationError):
    pass


class ZeroNormReferenceError(ValidationError):
    pass


class InsufficientSamplesError(ValidationError):
    pass


class EmptyBufferError(ValidationError):
    pass


class SolveFailureError(RegMDPError, ArithmeticError):
    pass


class NonFiniteStateError(RegMDPError, ArithmeticError):
    """An iterate overflowed; usually the learning rate is too large."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class MaxIterExceededError(RegMDPError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
