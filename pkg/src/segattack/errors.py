"""Exception hierarchy shared across the toolkit."""


class SegAttackError(Exception):
    """Base class for toolkit errors."""


class InvalidArgumentError(SegAttackError, ValueError):
    """Raised when an argument violates an operation's preconditions."""


class EncoderUnavailableError(SegAttackError, RuntimeError):
    """The encoder oracle could not be reached or failed while serving a request."""


class SegmenterError(SegAttackError, RuntimeError):
    """A segmenter oracle failed to produce a prediction."""


class PerturbationFileError(SegAttackError):
    """A stored perturbation is corrupt or inconsistent with its metadata."""


class ConfigError(SegAttackError, ValueError):
    """An experiment configuration is malformed."""
