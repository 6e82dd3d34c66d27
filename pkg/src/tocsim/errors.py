"""Exception hierarchy shared across the package."""


class TocsimError(Exception):
    """Base class for every error raised by tocsim."""


class DimensionError(TocsimError, ValueError):
    pass


class DomainError(TocsimError, ValueError):
    pass


class NonFiniteError(TocsimError, FloatingPointError):
    pass


class StateError(TocsimError, RuntimeError):
    pass


class DegenerateInputError(TocsimError, ValueError):
    """A row with zero norm reached an operation that divides by it."""


class ConfigError(TocsimError, ValueError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ParseError(TocsimError, ValueError):
    def __init__(self, message, offset=None, line=None):
        self.offset = offset
        self.line = line
        where = ""
        if offset is not None:
            where = f" (byte offset {offset})"
        elif line is not None:
            where = f" (line {line})"
        super().__init__(message + where)


class SizeError(TocsimError, ValueError):
    pass
