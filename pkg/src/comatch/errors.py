"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(ValueError):
    """Input is valid in type but numerically degenerate (zero norm, zero row)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during a computation."""


class StateError(RuntimeError):
    """A stateful container is not in the state an operation requires."""


class ParseError(ValueError):
    """A file could not be parsed.

    ``line`` is the 1-based line number of the offending row when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
