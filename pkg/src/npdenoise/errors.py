"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class NPDError(Exception):
    exit_code = 1


class UsageError(NPDError, ValueError):
    """Bad arguments or shape/length mismatches."""

    exit_code = 1


class ConfigError(UsageError):
    exit_code = 1


class DegeneratePlaneError(NPDError, ValueError):
    exit_code = 3


class DegenerateFitError(NPDError, ValueError):
    """Neighborhood too collinear to define a plane."""

    exit_code = 3

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"degenerate plane fit at point {index}")


class FormatError(NPDError):
    """Malformed or truncated binary/text file."""

    exit_code = 2


class ParseError(FormatError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class DataError(NPDError):
    exit_code = 2


class NumericalError(NPDError, FloatingPointError):
    exit_code = 3
