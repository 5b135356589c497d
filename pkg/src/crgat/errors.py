"""Exception hierarchy shared by every subsystem."""


class CrgatError(Exception):
    """Base class for all package errors."""


class ContractError(CrgatError, ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class FormatError(CrgatError):
    """A binary file is malformed. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class SolverError(CrgatError, RuntimeError):
    """A numerical solver failed to converge.

    ``last_iterate`` carries the last feasible point when one is known.
    """

    def __init__(self, message: str, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class InfeasibleError(CrgatError):
    """The optimization problem was certified (numerically) infeasible."""
