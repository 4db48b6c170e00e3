class ConfigError(ValueError):
    """Inconsistent shapes, counts, or settings."""


class NumericError(FloatingPointError):
    """Non-finite values where finite ones are required."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (e.g. an invalid action index)."""
