"""Exception hierarchy shared across the package."""


class BasinLabError(Exception):
    """Base class for all package errors."""


class DimensionError(BasinLabError, ValueError):
    """Shapes or dimensions are incompatible."""


class DomainError(BasinLabError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class UsageError(BasinLabError, ValueError):
    """An API was called with arguments that make no sense for it."""


class SpecError(BasinLabError, ValueError):
    """Parameters do not match the model architecture they claim to describe."""


class NonFiniteError(BasinLabError, ArithmeticError):
    """NaN or Inf appeared in a computation."""


class FormatError(BasinLabError, ValueError):
    """A file on disk does not follow the expected binary or text layout."""


class DegenerateGeometryError(BasinLabError, ValueError):
    """Anchor points do not span a plane."""


class SchemaError(BasinLabError, ValueError):
    """An experiment manifest failed validation."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
