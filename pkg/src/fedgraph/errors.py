class FedGraphError(Exception):
    pass


class ConfigError(FedGraphError, ValueError):
    """Invalid configuration, shapes or inputs detected before or during setup."""


class NumericError(FedGraphError, ArithmeticError):
    pass


class CheckpointError(FedGraphError):
    """Bad magic, unsupported version, or truncated binary file."""
