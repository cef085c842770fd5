"""Exception types shared across the package."""


class GoalgazeError(Exception):
    pass


class DimensionError(GoalgazeError, ValueError):
    """Operand shapes do not agree."""


class ConfigurationError(GoalgazeError, ValueError):
    """A parameter or setup violates an operation's preconditions."""


class ConstraintError(GoalgazeError, ValueError):
    """A value violates a declared constraint (e.g. negative attention weight)."""


class InputError(GoalgazeError, ValueError):
    pass


class DomainError(GoalgazeError, ValueError):
    pass


class GraphStateError(GoalgazeError, RuntimeError):
    """Backward called on a graph that was already consumed."""


class NonFiniteError(GoalgazeError, FloatingPointError):
    pass


class FormatError(GoalgazeError, ValueError):
    """Malformed binary file. ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
