"""Exception types shared across the package."""


class DLowError(Exception):
    """Base class for all package errors."""


class ConfigError(DLowError, ValueError):
    """Invalid configuration, shapes or dimensions."""


class ParseError(DLowError, ValueError):
    """Malformed motion or checkpoint file."""


class SingularityError(DLowError, ArithmeticError):
    """An affine map is (numerically) not invertible."""


class TrainingFault(DLowError, RuntimeError):
    """Training produced non-finite values or violated a frozen-model guarantee.

    ``last_good_state`` holds the most recent finite parameter snapshot when
    one is available.
    """

    def __init__(self, message, last_good_state=None, diagnostics=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.diagnostics = diagnostics or {}


class FrozenModelModified(TrainingFault):
    """The frozen generator's parameters changed during sampler training."""
