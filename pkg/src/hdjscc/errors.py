"""Exception types raised across the package."""


class HDJSCCError(Exception):
    """Base class for all package errors."""


class DegenerateSignalError(HDJSCCError, ValueError):
    pass


class SingularFadingError(HDJSCCError, ValueError):
    pass


class ShapeError(HDJSCCError, ValueError):
    pass


class CodingError(HDJSCCError, ValueError):
    """A symbol cannot be represented by its coding table."""


class DecodeError(HDJSCCError, ValueError):
    """The arithmetic decoder ran past the end of its input."""


class CorruptedStreamError(HDJSCCError, ValueError):
    """Container framing, checksum or reconstruction check failed."""


class TrainingDivergenceError(HDJSCCError, RuntimeError):
    pass


class ConfigurationError(HDJSCCError, ValueError):
    pass


class CheckpointVersionError(HDJSCCError, ValueError):
    pass
