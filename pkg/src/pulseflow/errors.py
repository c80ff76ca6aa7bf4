"""Exception hierarchy shared across the package."""


class PulseFlowError(Exception):
    """Base class for all library errors."""


class ArgumentError(PulseFlowError, ValueError):
    """An argument violates a documented precondition."""


class BandError(ArgumentError):
    """A frequency band is empty, inverted, or exceeds Nyquist."""


class DegenerateDenominatorError(ArgumentError):
    """A ratio denominator is too close to zero."""

    def __init__(self, index: int, value: float):
        super().__init__(f"denominator |{value!r}| too small at index {index}")
        self.index = index
        self.value = value


class DegenerateCorrelationError(ArgumentError):
    """Correlation is undefined because inputs have zero variance."""

    def __init__(self, message: str = "correlation undefined for constant inputs", metrics=None):
        super().__init__(message)
        self.metrics = metrics


class ArchitectureError(ArgumentError):
    """Input or parameter shapes do not match the declared architecture."""


class SingularityError(ArgumentError):
    """Evaluation at a time where a coefficient diverges."""


class NumericError(PulseFlowError, ArithmeticError):
    """A non-finite value appeared during computation."""


class TrainingDivergence(NumericError):
    """Training loss exploded or became non-finite."""

    def __init__(self, step: int, terms: dict):
        detail = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step
        self.terms = terms


class SamplerBlowup(NumericError):
    """SDE state became non-finite."""

    def __init__(self, step: int, t: float, realization: int | None = None):
        where = "" if realization is None else f" (realization {realization})"
        super().__init__(f"non-finite SDE state at step {step}, t={t:.6g}{where}")
        self.step = step
        self.t = t
        self.realization = realization


class IntegrityError(PulseFlowError):
    """A stored artifact failed hash verification."""


class ConfigError(ArgumentError):
    """A configuration file failed to parse or validate."""
