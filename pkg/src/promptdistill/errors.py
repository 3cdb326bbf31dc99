"""Exception hierarchy shared across the package.

Every error raised on purpose derives from :class:`PromptDistillError` so the
CLI can map it onto a stable exit code.
"""


class PromptDistillError(Exception):
    """Base class for all deliberate errors."""


class ShapeError(PromptDistillError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(PromptDistillError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ValidationError(PromptDistillError, ValueError):
    """Input data violates an operation's precondition."""


class UsageError(PromptDistillError, RuntimeError):
    """An API was called in an unsupported way (e.g. backward on a non-scalar)."""


class NumericError(PromptDistillError, FloatingPointError):
    """A loss or gradient became non-finite."""


class CorruptFileError(PromptDistillError, IOError):
    """A container file is truncated, damaged or internally inconsistent."""


class MagicError(CorruptFileError):
    """The file does not start with the expected magic string."""


class VersionMismatchError(PromptDistillError, IOError):
    def __init__(self, found: int, expected: int, what: str = "file"):
        super().__init__(
            f"{what} format version {found} is not supported (expected version {expected})"
        )
        self.found = found
        self.expected = expected


class StratificationError(PromptDistillError, ValueError):
    """A stratified split would leave one side without a class."""


class UndefinedMetricError(PromptDistillError, ValueError):
    """A metric is undefined for the given scores/labels."""


class AggregationError(PromptDistillError, ValueError):
    """Run reports cannot be aggregated together."""
