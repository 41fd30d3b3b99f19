"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class StabError(Exception):
    exit_code = 1


class FormatError(StabError):
    exit_code = 4


class IntegrityError(StabError):
    exit_code = 4


class ValidationError(StabError, ValueError):
    exit_code = 4


class RangeError(StabError, ValueError):
    exit_code = 3


class ShapeError(StabError, ValueError):
    exit_code = 3


class DegeneracyError(StabError):
    exit_code = 4


class InsufficientDataError(StabError):
    exit_code = 4


class TrackingError(StabError):
    exit_code = 4


class StateError(StabError):
    exit_code = 3


class ConfigError(StabError, ValueError):
    exit_code = 3
