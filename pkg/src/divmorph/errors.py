"""Exception hierarchy shared across the toolkit."""


class DivMorphError(Exception):
    """Base class for all toolkit errors."""


class ContractViolationError(DivMorphError):
    """An argument violated a documented precondition (shape, range, finiteness)."""


class NumericalFailureError(DivMorphError):
    """A numerical routine failed to converge or produced non-finite output."""


class SingularMatrixError(NumericalFailureError):
    """A matrix required to be invertible was numerically singular."""


class EvaluationError(DivMorphError):
    """A user-supplied callable returned a non-finite value."""


class FormatError(DivMorphError):
    """A serialized file was malformed or carried an unsupported version."""
