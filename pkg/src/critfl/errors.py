"""Exception hierarchy. The CLI maps each family to an exit code."""


class CritflError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CritflError, ValueError):
    """Invalid hyperparameter, schedule or run configuration."""


class InputError(CritflError, ValueError):
    """Malformed arguments to a numerical operation (shapes, empty batches)."""


class DataError(CritflError):
    """A dataset could not be read or is inconsistent."""


class ParseError(DataError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")
