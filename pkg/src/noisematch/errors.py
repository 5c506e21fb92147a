"""Exception types raised across the package.

Every error derives from :class:`NoiseMatchError`.  Data problems
additionally derive from :class:`ValueError` so callers that only know the
standard library can still catch them.
"""


class NoiseMatchError(Exception):
    """Base class for all package errors."""


class DataError(NoiseMatchError, ValueError):
    """Invalid input data (maps to CLI exit code 3)."""


# geometry
class EmptyCloud(DataError):
    pass


class InvalidNoiseLevel(DataError):
    pass


class KTooLarge(DataError):
    pass


class SampleTooLarge(DataError):
    pass


class PatchTooLarge(DataError):
    pass


class UnknownShape(DataError):
    pass


class NonFiniteValue(DataError):
    pass


# transport
class CardinalityMismatch(DataError):
    pass


class OracleTooLarge(DataError):
    pass


class InvalidMatching(DataError):
    pass


class SinkhornDiverged(RuntimeWarning):
    """Sinkhorn iterations stopped at ``max_iters`` before the marginals converged."""


# autodiff
class ShapeError(NoiseMatchError, ValueError):
    pass


class NonScalarLoss(NoiseMatchError, ValueError):
    pass


class GraphConsumed(NoiseMatchError, RuntimeError):
    pass


# network / training
class PatchTooSmall(DataError):
    pass


class SupervisionLeak(NoiseMatchError, RuntimeError):
    """Clean reference data was touched from the unsupervised training path."""


class NeedTwoObservations(DataError):
    pass


class TrainingDiverged(NoiseMatchError, RuntimeError):
    """Loss became non-finite.

    ``params`` holds the last parameters for which the loss was finite and
    ``log`` the loss rows recorded up to that point.
    """

    def __init__(self, message, params=None, log=None):
        super().__init__(message)
        self.params = params
        self.log = log if log is not None else []


# pipeline
class IoError(NoiseMatchError, OSError):
    pass


class NoReference(DataError):
    pass


# image
class OddDimensions(DataError):
    pass


class ImageTooSmall(DataError):
    pass
