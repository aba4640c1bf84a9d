"""Exception hierarchy shared across the package."""


class MamaError(Exception):
    """Base class for all package errors."""


class SchemaError(MamaError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"missing required column: {column!r}")


class RowError(MamaError):
    def __init__(self, row, message):
        self.row = row
        super().__init__(f"row {row}: {message}")


class ConfigError(MamaError, ValueError):
    pass


class TemplateError(MamaError):
    def __init__(self, keyword, message=None):
        self.keyword = keyword
        super().__init__(message or f"unresolvable template placeholder: {{{keyword}}}")


class ShapeError(MamaError, ValueError):
    pass


class AlignmentError(MamaError, ValueError):
    pass


class NumericError(MamaError, ArithmeticError):
    pass


class InputError(MamaError, ValueError):
    pass


class CheckpointError(MamaError):
    """Raised when a checkpoint cannot be read back faithfully."""

    def __init__(self, message, parameter=None):
        self.parameter = parameter
        super().__init__(message)


class VersionError(CheckpointError):
    pass


class NonFiniteLossError(MamaError, FloatingPointError):
    def __init__(self, breakdown):
        self.breakdown = breakdown
        super().__init__(f"non-finite loss: {breakdown}")
