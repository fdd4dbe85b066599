"""Exception types shared across the package."""


class PromptloomError(Exception):
    """Base class for all promptloom errors."""


class MissingFile(PromptloomError):
    """A referenced dataset or checkpoint file does not exist."""


class ChecksumMismatch(PromptloomError):
    """Stored checksum disagrees with the bytes on disk."""


class LabelOutOfRange(PromptloomError):
    """A label is outside [0, class_count)."""


class InvalidShape(PromptloomError):
    """Dataset geometry or class layout is invalid."""


class InvalidGeometry(PromptloomError):
    """Prompt geometry leaves no interior (or is otherwise degenerate)."""


class ShapeMismatch(PromptloomError):
    """An array does not match the shape a consumer declared."""


class NonFiniteLoss(PromptloomError):
    """Training loss became NaN/Inf."""


class NonFiniteGradient(PromptloomError):
    """Attack gradient became NaN/Inf."""


class InfeasibleMapping(PromptloomError):
    """An injective class-to-index map cannot exist (d < k)."""


class ZeroBaseline(PromptloomError):
    """Improvement rate requested against a zero baseline."""


class EmptyInput(PromptloomError):
    """An operation that needs at least one element got none."""


class ConfigError(PromptloomError):
    """A run configuration failed validation. Message names the field."""
