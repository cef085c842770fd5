"""Goal-directed filter-wise attention for a frozen convolutional classifier,
with a target-weighted training objective and a signal-detection harness."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigurationError,
    ConstraintError,
    DimensionError,
    DomainError,
    FormatError,
    GoalgazeError,
    GraphStateError,
    InputError,
    NonFiniteError,
)
