"""Exception hierarchy. CLI exit codes key off the base classes."""


class VanishcostError(Exception):
    """Base class for all package errors."""


class ConfigError(VanishcostError):
    """Bad experiment configuration (CLI exit code 2)."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CertificateError(VanishcostError):
    """A theorem hypothesis could not be certified (CLI exit code 3)."""

    def __init__(self, message, missing=None, producer=None):
        self.missing = missing
        self.producer = producer
        if missing and producer:
            message = f"{message} [missing certificate: {missing}; produced by: {producer}]"
        super().__init__(message)


class NumericalError(VanishcostError):
    """Numerical failure (CLI exit code 4)."""


# geometry
class UnsupportedDomainError(VanishcostError):
    pass


class InvalidResolutionError(VanishcostError):
    pass


class DimensionMismatchError(VanishcostError):
    pass


class EmptyShrinkError(VanishcostError):
    pass


# velocity
class UnknownFieldError(VanishcostError):
    pass


class MissingPotentialError(VanishcostError):
    pass


class ExpressionError(VanishcostError):
    pass


# flow
class OutOfDomainError(NumericalError):
    def __init__(self, message, time=None, index=None):
        self.time = time
        self.index = index
        super().__init__(message)


# pde
class SolverFailure(NumericalError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class InvalidAnnulusError(VanishcostError):
    pass


class ScaleError(NumericalError):
    pass


# costlab / analysis
class DegenerateObservationError(NumericalError):
    pass


class FitError(VanishcostError):
    pass


class UndefinedConstantError(VanishcostError):
    pass


class PreconditionError(VanishcostError):
    pass


class InvalidRegionError(VanishcostError):
    pass


class ConstructionError(NumericalError):
    pass
