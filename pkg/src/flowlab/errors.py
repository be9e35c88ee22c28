"""Exception types shared across the package."""


class FlowlabError(Exception):
    """Base class for all package errors."""


class InputError(FlowlabError, ValueError):
    """Arguments are malformed or out of range."""


class DomainError(FlowlabError, ValueError):
    """A time or scale lies outside the domain where a formula is defined."""


class UnsupportedSchemeError(FlowlabError, ValueError):
    """A sampler scheme was paired with a forward process it cannot handle."""


class SingularMapError(FlowlabError, ArithmeticError):
    """A step map could not be inverted to the requested tolerance."""

    def __init__(self, message, residual=None, location=None):
        super().__init__(message)
        self.residual = residual
        self.location = location


class StiffnessError(FlowlabError, ArithmeticError):
    """The adaptive integrator's step size collapsed below its floor."""


class ComputationError(FlowlabError, ArithmeticError):
    """A numerical routine produced a non-finite or unreliable result."""
