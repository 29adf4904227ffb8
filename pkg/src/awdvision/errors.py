"""Error classes shared across modules (and mapped to CLI exit codes)."""


class ConfigError(ValueError):
    """A run or model configuration violates one of its invariants."""


class NumericalError(RuntimeError):
    """A non-finite value or degenerate statistic was produced."""
