class ConfigError(ValueError):
    """Invalid scene or run configuration. Messages name the offending key."""


class ContractError(RuntimeError):
    """A caller broke an operation's precondition (bad shape, illegal action, ...)."""


class NumericError(FloatingPointError):
    """A NaN or Inf appeared in a computation."""
