"""Exception hierarchy shared by all modules.

Each class carries the process exit code the command line front end uses.
"""


class HexqgError(Exception):
    exit_code = 1

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class InvalidArgument(HexqgError, ValueError):
    exit_code = 2


class ValidationError(InvalidArgument):
    pass


class NumericFailure(HexqgError, ArithmeticError):
    exit_code = 3


class EdgeSpectrumHit(NumericFailure):
    """lambda sits on a Dirichlet eigenvalue of some edge (s_e vanishes)."""


class InteriorSpectrumHit(NumericFailure):
    """The interior vertex system is singular or badly conditioned."""


class ConversionDegenerate(NumericFailure):
    """sin(sqrt(lambda)) vanishes, so the two D-N models cannot be converted."""


class UniquenessViolation(NumericFailure):
    """A sub-block that should have full rank does not."""


class Inconsistency(NumericFailure):
    """A least-squares residual exceeded its gate."""


class DescentUnderdetermined(NumericFailure):
    pass


class RatioSingular(NumericFailure):
    pass


class AnchorMissing(NumericFailure):
    pass


class NonConvergence(NumericFailure):
    pass


class ModelMismatch(NumericFailure):
    pass


class CoverageError(HexqgError):
    exit_code = 4
