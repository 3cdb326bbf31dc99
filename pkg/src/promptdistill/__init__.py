"""Two-stage privileged-feature distillation for 3D volume classification.

A template model is trained on contrast-enhanced (CE) volumes; a two-branch
PromptNet trained on non-enhanced (NE) volumes is then pulled towards the
template's features through an L1 prompt loss whose per-sample weight follows
the teacher/student prediction gap. Everything runs on a small numpy
reverse-mode autodiff engine in float64.
"""

from .errors import (
    AggregationError,
    ConfigError,
    CorruptFileError,
    MagicError,
    NumericError,
    PromptDistillError,
    ShapeError,
    StratificationError,
    UndefinedMetricError,
    UsageError,
    ValidationError,
    VersionMismatchError,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationError",
    "ConfigError",
    "CorruptFileError",
    "MagicError",
    "NumericError",
    "PromptDistillError",
    "ShapeError",
    "StratificationError",
    "UndefinedMetricError",
    "UsageError",
    "ValidationError",
    "VersionMismatchError",
    "__version__",
]
