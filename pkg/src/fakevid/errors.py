"""Shared exception types mapped to CLI exit codes."""


class ConfigError(Exception):
    """Invalid configuration: bad values, unknown keys, degenerate splits. Exit code 2."""


class DataParseError(Exception):
    """A dataset file could not be parsed; the message names the location. Exit code 3."""


class DataValidationError(Exception):
    """A record violates the dataset invariants; the message names field and record. Exit code 3."""


class TrainingDiverged(Exception):
    """Training produced non-finite values. Carries the phase report so far. Exit code 4."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
