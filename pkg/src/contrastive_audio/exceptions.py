"""Exception hierarchy shared by every module of the package."""


class ContrastiveAudioError(Exception):
    """Base class for all package errors."""


class ConfigError(ContrastiveAudioError, ValueError):
    """Invalid configuration or usage (CLI exit code 2)."""


# signal-io
class MalformedWav(ContrastiveAudioError):
    pass


class UnsupportedFormat(ContrastiveAudioError):
    pass


class ParseError(ContrastiveAudioError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingFile(ContrastiveAudioError, FileNotFoundError):
    pass


# dsp / augment
class ClipTooShort(ContrastiveAudioError, ValueError):
    pass


class InvalidRange(ContrastiveAudioError, ValueError):
    pass


class SampleRateMismatch(ContrastiveAudioError, ValueError):
    pass


class InvalidRt60(ContrastiveAudioError, ValueError):
    pass


class BatchTooSmall(ContrastiveAudioError, ValueError):
    pass


# autodiff / model
class ShapeMismatch(ContrastiveAudioError, ValueError):
    pass


class NotScalar(ContrastiveAudioError, ValueError):
    pass


class DisconnectedGraph(ContrastiveAudioError, RuntimeError):
    pass


class NotSquare(ContrastiveAudioError, ValueError):
    pass


class NonFiniteGradient(ContrastiveAudioError, FloatingPointError):
    pass


# train
class InsufficientData(ContrastiveAudioError, ValueError):
    pass


class NonFiniteLoss(ContrastiveAudioError, FloatingPointError):
    pass


class MissingLabels(ContrastiveAudioError, ValueError):
    pass


class CorruptCheckpoint(ContrastiveAudioError):
    pass


class VersionMismatch(ContrastiveAudioError):
    pass


# eval
class LengthMismatch(ContrastiveAudioError, ValueError):
    pass


class OutOfRangeLabel(ContrastiveAudioError, ValueError):
    pass


class EmptyMatrix(ContrastiveAudioError, ValueError):
    pass
