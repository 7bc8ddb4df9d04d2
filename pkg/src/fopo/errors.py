class ContractViolation(ValueError):
    """A precondition of an operation was not met."""


class NumericError(FloatingPointError):
    """Non-finite values where finite ones are required."""


class DegenerateRatioError(NumericError):
    """Likelihood ratio with a zero behavior probability."""


class ZeroCountError(ContractViolation):
    """A feature does not occur in the candidate set."""


class ExhaustionError(ContractViolation):
    """No unused features remain."""


class DegenerateInstanceError(ValueError):
    """An RSA instance on which the rational chain does not converge."""


class ConfigError(ValueError):
    """Inconsistent configuration values."""
