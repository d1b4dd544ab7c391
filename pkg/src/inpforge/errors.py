"""Exception hierarchy shared by every module.

CLI exit codes map onto the three top-level families: configuration
problems exit with 2, data/format problems with 3, numeric problems with 4.
"""


class InpForgeError(Exception):
    exit_code = 1


class ConfigError(InpForgeError, ValueError):
    exit_code = 2


class DataError(InpForgeError):
    exit_code = 3


class FormatError(DataError):
    """Corrupt, truncated or version-mismatched binary file."""


class MetricUndefinedError(DataError, ValueError):
    """A metric was requested on inputs for which it has no value."""


class NumericError(InpForgeError, ArithmeticError):
    exit_code = 4


class StepRejected(NumericError):
    """Optimizer refused to apply a step because of non-finite gradients."""

    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"non-finite gradient in: {', '.join(self.names)}")


class ShapeError(InpForgeError, ValueError):
    exit_code = 2


class ContractError(InpForgeError, RuntimeError):
    """An operation was called outside its documented preconditions."""


class DegenerateInputWarning(UserWarning):
    """Emitted when a guarded degenerate case (zero norm, 0/0) was hit."""
