class ConfigError(ValueError):
    """Invalid configuration document or argument combination."""


class ConstraintError(ValueError):
    """A point does not satisfy its manifold's defining constraint."""


class DomainError(ValueError):
    """Input outside the domain where an operation is defined."""


class NumericFailureError(ArithmeticError):
    """Iteration failed to converge or produced non-finite values."""


class RankDeficiencyError(NumericFailureError):
    pass


class IntegrationError(NumericFailureError):
    """An integrator left the manifold or produced non-finite state."""


class StepSizeUnderflowError(IntegrationError):
    pass


class UnsupportedDensityError(NotImplementedError):
    """The target has no closed-form density."""
