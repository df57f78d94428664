"""Exception hierarchy shared across the package."""


class CartNetError(Exception):
    """Base class for all package errors."""


class DegenerateCell(CartNetError, ValueError):
    pass


class NonPositiveDefinite(CartNetError, ValueError):
    pass


class UnknownElement(CartNetError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown element"


class ParseError(CartNetError, ValueError):
    """Malformed CIF input; carries the 1-based line and column when known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)


class MissingCell(ParseError):
    pass


class SchemaError(CartNetError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class EmptyDataset(CartNetError, ValueError):
    pass


class NoAtoms(CartNetError, ValueError):
    pass


class DuplicateAtoms(CartNetError, ValueError):
    pass


class ShapeMismatch(CartNetError, ValueError):
    pass


class IndexOutOfRange(CartNetError, IndexError):
    pass


class BatchTooSmall(CartNetError, ValueError):
    pass


class MissingTemperature(CartNetError, ValueError):
    pass


class MissingAdp(CartNetError, ValueError):
    pass


class EmptyMask(CartNetError, ValueError):
    pass


class NonFiniteLoss(CartNetError, FloatingPointError):
    pass


class ConfigMismatch(CartNetError, ValueError):
    pass
