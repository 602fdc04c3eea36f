"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or ill-conditioned values."""


class ConfigError(ValueError):
    """A scenario configuration is malformed.

    Parameters
    ----------
    message : str
        Human readable description.
    field : str, optional
        Dotted name of the offending field.
    line : int, optional
        1-based line number in the source file, when known.
    """

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
