"""Exception types raised across the package."""

from silo._lex import DSLSyntaxError
from silo.symexpr import NonAffineSystem, NonLinearInDelta

__all__ = [
    "Deadlock",
    "DSLSyntaxError",
    "DuplicateContainer",
    "NoPipelineBenefit",
    "NonAffineSystem",
    "NonLinearInDelta",
    "NonTerminating",
    "NotApplicable",
    "NotCountable",
    "NotPipelinable",
    "OutOfBounds",
    "SiloError",
    "UnboundSymbol",
    "UnloweredSchedule",
    "UnresolvableDependency",
]


class SiloError(Exception):
    """Base class for analysis and transformation refusals."""


class UnboundSymbol(SiloError, NameError):
    pass


class DuplicateContainer(SiloError, ValueError):
    pass


class NotCountable(SiloError):
    pass


class NonTerminating(SiloError):
    pass


class UnresolvableDependency(SiloError):
    pass


class NotPipelinable(SiloError):
    pass


class NoPipelineBenefit(NotPipelinable):
    pass


class NotApplicable(SiloError):
    pass


class UnloweredSchedule(SiloError):
    pass


class OutOfBounds(SiloError, IndexError):
    pass


class Deadlock(SiloError):
    pass
