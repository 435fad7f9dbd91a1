"""Exception hierarchy shared across the package."""


class GeoflowError(Exception):
    """Base class for all geoflow errors."""


class ParameterError(GeoflowError):
    """A parameter is outside its documented domain."""


class DomainError(GeoflowError):
    """A numeric input violates a function's domain contract."""


class DegenerateGeometryError(GeoflowError):
    """Zone geometry is degenerate (e.g. duplicate centroids)."""


class CalibrationError(GeoflowError):
    """Generator calibration target is infeasible."""


class DegenerateFlowError(GeoflowError):
    """A city/mode flow slice has no dynamic range and cannot be normalized."""


class InsufficientHistoryError(GeoflowError):
    """A temporal split range is too short for the models that consume it."""


class NoNeighborsError(GeoflowError):
    """A zone has no neighbors under the given spatial weights."""


class RankDeficiencyError(GeoflowError):
    """A (local) design matrix is rank deficient."""


class NonConvergenceError(GeoflowError):
    """An iterative fit exceeded its iteration budget.

    Carries the last iterate so callers can inspect it.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class AlignmentError(GeoflowError):
    """Two data structures that must be aligned are not."""


class TrainingFailureError(GeoflowError):
    """Gradient training diverged; carries the last stable epoch."""

    def __init__(self, message, last_stable_epoch=None):
        super().__init__(message)
        self.last_stable_epoch = last_stable_epoch


class DegenerateTestError(GeoflowError):
    """A statistical test is undefined for the given inputs."""


class DegenerateVarianceError(GeoflowError):
    """Values are constant where variation is required."""


class UndefinedScoreError(GeoflowError):
    """A score (e.g. silhouette) is undefined for the given labeling."""


class SelectionError(GeoflowError):
    """A parameter sweep found no admissible candidate."""


class InsufficientStratumError(GeoflowError):
    """A regression stratum has too few zones."""


class InsufficientCityError(GeoflowError):
    """A city has too few zones for the requested experiment."""


class InsufficientSpanError(GeoflowError):
    """The panel spans too few periods for the requested profile."""


class ProtocolError(GeoflowError):
    """Model outputs being compared were not produced under one protocol."""


class ConfigError(GeoflowError):
    """Run configuration is invalid (unknown keys, bad values, missing file)."""
