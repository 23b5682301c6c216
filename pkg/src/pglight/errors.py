"""Exception types shared across the toolkit.

Each class carries the CLI exit code used when it escapes a command.
"""


class PglError(Exception):
    exit_code = 3


class ShapeError(PglError, ValueError):
    pass


class InputError(PglError, ValueError):
    pass


class CheckpointError(PglError):
    pass


class PlanError(PglError, ValueError):
    pass


class NumericError(PglError, ArithmeticError):
    """A numeric invariant does not hold (non-finite value, zero norm, ...)."""

    exit_code = 4
