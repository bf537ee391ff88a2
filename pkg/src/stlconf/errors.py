"""Exception hierarchy shared by all stlconf modules."""


class StlConfError(Exception):
    """Base class for every error raised by this package."""


class EmptyTrace(StlConfError):
    pass


class SchemaError(StlConfError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParamError(StlConfError, ValueError):
    pass


class FormulaSyntaxError(StlConfError, ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class DegenerateData(StlConfError, ValueError):
    pass


class OptError(StlConfError, RuntimeError):
    pass


class StateError(StlConfError, RuntimeError):
    pass
