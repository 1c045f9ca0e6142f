"""Exception hierarchy shared by every module.

All domain failures derive from :class:`LoadAnonError` so the CLI can map
them to a single exit status.
"""


class LoadAnonError(ValueError):
    """Base class for domain errors (bad input, violated preconditions)."""


class EmptyInput(LoadAnonError):
    pass


class DuplicateReading(LoadAnonError):
    pass


class OffGrid(LoadAnonError):
    pass


class EmptyWindow(LoadAnonError):
    pass


class OutOfRange(LoadAnonError):
    pass


class ShapeMismatch(LoadAnonError):
    pass


class MissingHeader(LoadAnonError):
    pass


class NoParseableRows(LoadAnonError):
    pass


class AllSeriesDropped(LoadAnonError):
    pass


class TooShort(LoadAnonError):
    pass


class Singular(LoadAnonError):
    pass


class TooFewPoints(LoadAnonError):
    pass


class ConfigError(LoadAnonError):
    """Experiment configuration violates the schema.

    ``path`` points at the offending field in jq-like dotted form (``.seed``).
    """

    def __init__(self, message: str, path: str = "."):
        super().__init__(f"{path}: {message}")
        self.path = path
