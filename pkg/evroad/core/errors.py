"""Exception hierarchy shared by the services, the CLI and the HTTP API.

Every error carries the process exit code the CLI reports for it:
1 usage/config, 2 data or format, 3 numeric.
"""


class EvroadError(Exception):
    exit_code = 1


class UsageError(EvroadError):
    exit_code = 1


class ConfigError(EvroadError):
    exit_code = 1


class PreconditionError(EvroadError):
    exit_code = 1


class DataFormatError(EvroadError):
    exit_code = 2


class ParseError(DataFormatError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VersionError(DataFormatError):
    pass


class CorruptionError(DataFormatError):
    pass


class ShapeError(DataFormatError):
    pass


class NumericError(EvroadError):
    exit_code = 3


class TrainingError(NumericError):
    pass
