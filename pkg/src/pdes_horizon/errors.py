class HorizonError(Exception):
    """Base class for package errors."""

    exit_code = 1


class ConfigError(HorizonError, ValueError):
    """Invalid configuration, mismatched inputs or a violated precondition."""

    exit_code = 2


class InsufficientDataError(ConfigError):
    pass


class NotSaturatedError(ConfigError):
    pass


class MissingCellsError(ConfigError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class ResourceLimitError(HorizonError):
    exit_code = 3


class FitError(HorizonError):
    exit_code = 4


class ArchiveIOError(HorizonError, OSError):
    exit_code = 5


class UnknownSelectionError(ConfigError):
    def __init__(self, message, available=()):
        super().__init__(message)
        self.available = list(available)
