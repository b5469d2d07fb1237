"""Exception hierarchy shared across the package.

Load failures are split into distinct subclasses so callers can tell a
corrupt header from a structurally valid file with wrong tensor shapes.
"""


class CacheTrapError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(CacheTrapError):
    """Invalid model or run configuration."""


class InputError(CacheTrapError):
    """Caller-supplied data violates an operation's preconditions."""


class TruncationError(InputError):
    """Prompt does not fit the model's sequence budget; nothing is truncated silently."""


class TokenizeError(InputError):
    """Text cannot be tokenized under the active tokenizer spec."""


class DatasetError(InputError):
    """Labeled dataset failed validation."""


class InjectionError(CacheTrapError):
    """Fault coordinate does not address a live cache word."""


class AddressError(CacheTrapError):
    """Coordinate is outside the modeled memory layout."""


class GuardError(CacheTrapError):
    """Exhaustive-enumeration scope exceeds the evaluation budget."""


class UndefinedPredictionError(CacheTrapError):
    """A label-token logit was NaN; the prediction is undefined, never argmax'd."""


class LoadError(CacheTrapError):
    """Base class for binary model-format failures."""


class BadMagicError(LoadError):
    pass


class VersionError(LoadError):
    pass


class TruncatedStreamError(LoadError):
    pass


class ShapeError(LoadError):
    pass


class UnknownTensorError(LoadError):
    pass
