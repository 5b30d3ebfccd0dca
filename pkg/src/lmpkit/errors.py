"""Exception types raised across lmpkit."""


class LmpkitError(Exception):
    """Base class for all library errors."""


class SizeError(LmpkitError, ValueError):
    """Shapes or sizes are inconsistent with an operation."""


class NonFiniteError(LmpkitError, FloatingPointError):
    """An operation produced NaN or Inf."""


class LabelError(LmpkitError, ValueError):
    """A class label lies outside ``[0, num_classes)``."""


class ContextError(LmpkitError, ValueError):
    """A backward pass received a context from a mismatched forward call."""


class ExcludedChannel(LmpkitError):
    """A proposal channel is all zero and carries no peak."""


class EmptyActivation(LmpkitError):
    """Every channel of a feature map is zero."""


class PlacementError(LmpkitError):
    """Synthetic patterns could not be placed within the retry budget."""


class TrainingDiverged(LmpkitError):
    """Loss or parameters became non-finite during training."""

    def __init__(self, step, message="training diverged"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class ConfigError(LmpkitError, ValueError):
    """An experiment config is malformed.

    ``pointer`` is a JSON pointer (RFC 6901) to the offending location.
    """

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
        self.detail = message


class IoError(LmpkitError, OSError):
    """A required file (checkpoint, manifest, dataset) is missing or unreadable."""
