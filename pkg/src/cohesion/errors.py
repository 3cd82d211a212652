"""Exception types shared across the toolkit.

Every error raised on a data-contract violation derives from CohesionError so
callers (and the CLI) can distinguish bad input from bugs.
"""

from __future__ import annotations


class CohesionError(Exception):
    """Base class for all toolkit errors."""


# --- feature files and records -----------------------------------------


class EmptyFileError(CohesionError):
    """File has no header line at all (a header-only file is legal)."""


class HeaderMismatchError(CohesionError):
    """Header is malformed or does not match the expected modality/dim."""


class MalformedRecordError(CohesionError):
    """A record line is unparseable, non-finite, or a duplicate key."""


class InvariantViolationError(CohesionError):
    """An in-memory object violates its declared invariants."""


class DimMismatchError(CohesionError):
    """Vector lengths disagree where they must match."""


class EmptyInputError(CohesionError):
    """An operation that needs at least one element got none."""


# --- labels and datasets ------------------------------------------------


class LevelOutOfRangeError(CohesionError):
    """A cohesion level outside {0, 1, 2, 3}."""


class DuplicateIdError(CohesionError):
    """The same image id appears twice where ids must be unique."""


class NonFiniteInputError(CohesionError):
    """NaN or infinity where a finite real is required."""


# --- SVR solver ----------------------------------------------------------


class EmptyTrainingSetError(CohesionError):
    """Training requires at least one sample."""


class ConvergenceError(CohesionError):
    """Solver hit max_iter with the KKT violation still above tol.

    Carries the best iterate so callers can salvage it: `betas`, `bias`,
    `violation`, and (when raised by train_svr) `model`.
    """

    def __init__(self, message, *, betas=None, bias=None, violation=None, model=None):
        super().__init__(message)
        self.betas = betas
        self.bias = bias
        self.violation = violation
        self.model = model


class InfeasiblePointError(CohesionError):
    """Dual variables violate the equality or box constraints."""


# --- fusion ---------------------------------------------------------------


class MissingModalityError(CohesionError):
    """A required modality has no features/predictions at all."""


class ModalityMismatchError(CohesionError):
    """Weight vector and prediction set cover different modalities."""


class BadStepError(CohesionError):
    """Grid step does not divide 1 within tolerance."""


class EmptyValidationSetError(CohesionError):
    """Grid search needs at least one validation image."""


# --- evaluation ------------------------------------------------------------


class EmptyTruthError(CohesionError):
    """MSE over an empty truth set is undefined."""


class MissingPredictionError(CohesionError):
    """A truth image has no prediction."""


# --- cli -------------------------------------------------------------------


class UsageError(CohesionError):
    """Bad command line (unknown flag, missing required argument)."""
