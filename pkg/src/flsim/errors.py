"""Exception types shared across the simulator."""


class FLSimError(Exception):
    """Base class for all flsim errors."""


class ConfigError(FLSimError):
    """Invalid configuration value, dimension, or method/hparam combination."""


class ParseError(ConfigError):
    """Config text could not be parsed; carries the offending key and line."""

    def __init__(self, message, key=None, line=None):
        detail = message
        if key is not None:
            detail += f" (key: {key})"
        if line is not None:
            detail += f" (line {line})"
        super().__init__(detail)
        self.key = key
        self.line = line


class NumericalOverflowError(FLSimError):
    """Non-finite loss or gradient; carries the offending block name."""

    def __init__(self, block):
        super().__init__(f"non-finite value in block '{block}'")
        self.block = block


class UnsupportedOperationError(FLSimError):
    """Operation not defined for this model kind."""


class DivergenceError(FLSimError):
    """Training produced non-finite parameters or losses.

    ``metrics`` holds the per-round records completed before the failure.
    """

    def __init__(self, method, round_idx, metrics=None):
        super().__init__(f"method '{method}' diverged at round {round_idx}")
        self.method = method
        self.round_idx = round_idx
        self.metrics = metrics if metrics is not None else []
