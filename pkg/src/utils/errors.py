"""Exception hierarchy shared by every module of the laboratory."""

from typing import Optional, Sequence


class LabError(Exception):
    """Base class for all laboratory errors."""


class ValidationError(LabError, ValueError):
    """Input violates a documented invariant.

    Args:
        message: Human readable description
        invariant: Short name of the violated invariant
        indices: Offending array indices, when there are any
    """

    def __init__(self, message: str, invariant: str = '', indices: Optional[Sequence[int]] = None):
        self.invariant = invariant
        self.indices = tuple(int(i) for i in indices) if indices is not None else None
        detail = f" at {list(self.indices)}" if self.indices is not None else ''
        super().__init__(f"{message}{detail}" + (f" [{invariant}]" if invariant else ''))


class DimensionMismatch(ValidationError):
    pass


class NonStochasticRow(ValidationError):
    pass


class NonFullSupportBeta(ValidationError):
    pass


class BadReferenceMeasure(ValidationError):
    pass


class BadDiscount(ValidationError):
    pass


class NonFiniteLogit(ValidationError):
    pass


class InfeasibleSpec(ValidationError):
    pass


class ConfigError(ValidationError):
    """Experiment configuration is malformed; `invariant` holds the dotted field name."""


class NumericalError(LabError, ArithmeticError):
    """A numerical routine could not deliver a trustworthy result."""


class SolveFailure(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


class SingularGram(NumericalError):
    pass


class NotRealisable(NumericalError):
    pass


class NotTangent(NumericalError):
    pass


class StepSizeTooLarge(NumericalError):
    pass


class BlowupDetected(NumericalError):
    """A guard on |theta| or the maximal KL tripped during integration."""

    def __init__(self, message: str, t: float = float('nan')):
        self.t = t
        super().__init__(message)


class InadmissibleEta(LabError):
    """The initial timescale separation does not satisfy a stability hypothesis."""

    def __init__(self, eta0: float, threshold: float):
        self.eta0 = eta0
        self.threshold = threshold
        super().__init__(f"eta0={eta0:.6g} must exceed {threshold:.6g}")
