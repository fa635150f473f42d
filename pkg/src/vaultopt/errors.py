"""Exception and warning types."""


class VaultOptError(Exception):
    """Base class for all package errors."""


class GridInfeasible(VaultOptError):
    """Some free node is not interior to the convex hull of the supports."""


class SupportHullViolation(VaultOptError):
    """The domain closure is not contained in the hull of the support set."""


class LoadOffNode(VaultOptError):
    """A point or line load does not coincide with grid nodes."""


class EmptyActiveSet(VaultOptError):
    pass


class NumericalFailure(VaultOptError):
    """Breakdown of the interior-point linear algebra."""

    def __init__(self, msg: str, diagnostics: dict | None = None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


class MaxIter(VaultOptError):
    pass


class NonTermination(VaultOptError):
    """Member adding did not converge within the iteration cap."""


class DegenerateDesign(VaultOptError):
    """Zero objective: no material is needed to carry the load."""


class LoadOnSupport(UserWarning):
    """A load falls on a support node and is dropped."""
