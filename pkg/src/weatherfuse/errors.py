"""Exception types shared across the package."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class FormatError(ValueError):
    """A file or byte stream does not follow its declared format."""


class ParseError(FormatError):
    """A text record could not be parsed; carries the 1-based line number."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class EmptyRegionError(ValueError):
    """A box does not intersect the image it is applied to."""
