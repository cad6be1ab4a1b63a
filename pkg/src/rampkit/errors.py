"""Exception hierarchy shared by every rampkit module.

The CLI maps these onto exit codes: ConfigError -> 2, ValidationError
(and its subclasses) -> 3, OSError -> 4.
"""


class RampError(Exception):
    """Base class for rampkit errors."""


class ConfigError(RampError, ValueError):
    pass


class ValidationError(RampError, ValueError):
    pass


class ShapeError(ValidationError):
    pass


class ParseError(ValidationError):
    """Malformed binary or text artifact.

    ``offset`` is the byte offset where parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset
