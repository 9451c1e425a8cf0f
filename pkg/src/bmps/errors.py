"""Error taxonomy shared across the package.

Value-like problems (bad arguments, malformed data or files, incompatible
shapes) derive from ValueError; numeric blow-ups derive from ArithmeticError.
The CLI maps the first family to exit code 2 and the second to exit code 3.
"""


class BmpsError(Exception):
    """Base class for package errors."""


class ShapeError(BmpsError, ValueError):
    """Operands have incompatible dimensions."""


class DataError(BmpsError, ValueError):
    """Input data violates a documented precondition."""


class ParseError(BmpsError, ValueError):
    """A file or byte stream is malformed."""


class NumericError(BmpsError, ArithmeticError):
    """A computation produced non-finite values or exceeded a magnitude cap."""


class TrainingDiverged(NumericError):
    """Training loss blew up; carries the epoch/batch where it happened."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
