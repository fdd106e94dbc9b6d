"""Exception types shared across the package.

The CLI maps these onto process exit codes; see `latentshift.cli`.
"""


class LatentShiftError(Exception):
    """Base class for all package errors."""


class UsageError(LatentShiftError):
    """Bad command line or configuration input (unknown key, bad value)."""


class DataError(LatentShiftError):
    """Invalid dataset contents or generator specification."""


class ParseError(DataError):
    """CSV parse failure. Carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(LatentShiftError):
    """Array dimensions incompatible with a model or operation."""


class TrainingError(LatentShiftError):
    """Non-finite loss/gradient or other failure while fitting."""


class ShiftEstimationError(LatentShiftError):
    """Moment system for the marginal shift is unsolvable; fall back to unit weights."""


class DegenerateReweightError(LatentShiftError):
    """Posterior reweighting produced an all-zero numerator."""


class PreconditionError(LatentShiftError):
    """An oracle check was invoked on an instance violating its precondition."""


class SizeGuardError(LatentShiftError):
    """Brute-force enumeration request exceeds the supported instance size."""


class VerificationFailure(LatentShiftError):
    """One or more brute-force verification checks failed."""
