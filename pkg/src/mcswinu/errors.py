"""Exception hierarchy shared by every stage of the pipeline."""


class MCSwinUError(Exception):
    """Base class for all package errors."""


class ValidationError(MCSwinUError, ValueError):
    """Invalid argument, configuration or precondition."""


class ConfigError(ValidationError):
    """Malformed or unknown configuration entry."""


class FormatError(MCSwinUError):
    """A file does not carry the expected magic or version."""


class CorruptionError(MCSwinUError):
    """A file has a valid header but a damaged or truncated payload."""


class GenerationError(MCSwinUError):
    """A phantom cannot be laid out inside the requested grid."""


class CheckpointError(MCSwinUError):
    """A checkpoint cannot be loaded as requested."""


class NumericError(MCSwinUError, ArithmeticError):
    """Non-finite values appeared in activations or losses.

    ``state`` optionally carries the last parameters that were still finite.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
