"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible.

    ``dims`` maps a dimension name to the offending ``(got, expected)`` pair.
    """

    def __init__(self, message, dims=None):
        self.dims = dict(dims or {})
        if self.dims:
            detail = ", ".join(f"{k}: got {g}, expected {e}" for k, (g, e) in self.dims.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class GraphError(RuntimeError):
    pass


class GradientCheckError(ArithmeticError):
    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message if index is None else f"{message} at index {index}")


class FormatError(ValueError):
    """Malformed or unsupported file contents; ``offset`` is a byte position."""

    def __init__(self, message, offset=None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


class VersionError(FormatError):
    pass


class NumericalError(ArithmeticError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message if step is None else f"{message} at step {step}")
