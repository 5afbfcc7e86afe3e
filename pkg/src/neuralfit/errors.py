"""Exception types shared across the package.

CLI exit codes are attached to the classes so the command layer can map
failures without a lookup table.
"""


class FitError(Exception):
    exit_code = 1


class BadConfig(FitError, ValueError):
    exit_code = 1


class ShapeMismatch(FitError, ValueError):
    exit_code = 1


class DegenerateInput(FitError, ValueError):
    exit_code = 1


class BehindCamera(FitError, ValueError):
    exit_code = 1


class BadPrior(FitError, ValueError):
    exit_code = 1


class SingularSystem(FitError, ArithmeticError):
    exit_code = 1


class IoError(FitError, OSError):
    exit_code = 2


class FormatError(FitError):
    exit_code = 2


class NonFiniteState(FitError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class ConfigHashMismatch(UserWarning):
    """Emitted when a checkpoint was written under a different config."""
