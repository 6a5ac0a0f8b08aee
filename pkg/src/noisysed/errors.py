"""Exception hierarchy shared by every stage of the pipeline."""


class NoisySedError(Exception):
    """Base class for all package errors."""


class EmptyAudio(NoisySedError):
    pass


class DegeneratePower(NoisySedError):
    pass


class RateMismatch(NoisySedError):
    pass


class AudioTooShort(NoisySedError):
    pass


class ShapeMismatch(NoisySedError):
    pass


class BadParameter(NoisySedError):
    pass


class FormatError(NoisySedError):
    pass


class RowError(FormatError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownClass(NoisySedError):
    pass


class UnknownTag(NoisySedError):
    pass


class UnknownQuery(NoisySedError):
    pass


class BadEpoch(NoisySedError):
    pass


class BackendError(NoisySedError):
    pass


class CalibrationError(NoisySedError):
    pass


class EmptyRemix(NoisySedError):
    pass


class ConfigError(NoisySedError):
    pass


class BadReference(NoisySedError):
    pass


class Undefined(NoisySedError):
    pass
