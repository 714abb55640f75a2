"""Package-level error types, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite values produced during training or inference (exit code 3)."""
