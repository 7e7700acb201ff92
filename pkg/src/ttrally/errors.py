"""Exception hierarchy for ttrally.

Every module raises subclasses of TTRallyError so callers can catch a single
base class at pipeline or CLI level.
"""


class TTRallyError(Exception):
    """Base class for all ttrally errors."""


# -- core model -------------------------------------------------------------

class NotEnoughHits(TTRallyError):
    """Fewer than two hit times: no segment can be formed."""


class EmptyDataset(TTRallyError):
    """Statistics requested over an empty point collection."""


# -- camera -----------------------------------------------------------------

class BehindCamera(TTRallyError):
    """Projection requested for a point with non-positive depth."""


class NoIntersection(TTRallyError):
    """Viewing ray is parallel to (or points away from) the target plane."""


class NoVanishingPoint(TTRallyError):
    """The two image lines are parallel; no finite intersection."""


class CalibrationDegenerate(TTRallyError):
    """Head-on camera: depth edges are parallel in the image."""


class CalibrationFailed(TTRallyError):
    """Calibration system is rank deficient or did not converge."""


# -- ball reconstruction ----------------------------------------------------

class FitFailed(TTRallyError):
    """Parabola fit is rank deficient (too few distinct samples)."""


class NoBounceFound(TTRallyError):
    """No usable bounce candidate between a pair of hits."""


class OutOfRange(TTRallyError):
    """Trajectory evaluated outside its [0, T] time support."""


class SegmentRejected(TTRallyError):
    """Bounce-fit MSE exceeds the configured rejection threshold."""


# -- pipeline ---------------------------------------------------------------

class ParseError(TTRallyError):
    """Malformed record in a track or reconstruction file."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class SchemaError(TTRallyError):
    """File header is missing a required field."""


class VersionError(TTRallyError):
    """Unknown file format version tag."""


class AssumptionViolation(TTRallyError):
    """Synthetic camera violates the fixed-view assumptions."""


# -- anticipation -----------------------------------------------------------

class EnsembleTooSmall(TTRallyError):
    """Fewer than two ensemble members: spread is undefined."""


class NoCalibration(TTRallyError):
    """No conformal quantile available for the requested axis/horizon."""


class InputMismatch(TTRallyError):
    """Region and ground-truth sequences have different lengths."""


class SplitLeakage(TTRallyError):
    """Train/calibration/test splits share point ids."""


# -- control ----------------------------------------------------------------

class NoFeasibleTime(TTRallyError):
    """No horizon whose confidence region fits inside the reachable set."""


class NoContact(TTRallyError):
    """Ball is not moving into the racket face."""


class Infeasible(TTRallyError):
    """No racket normal sends the ball back onto the table."""


class EndOfRecording(TTRallyError):
    """Replay bounce requested but no recorded next segment exists."""
