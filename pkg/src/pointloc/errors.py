"""Exception hierarchy shared across the toolkit."""


class PointLocError(Exception):
    """Base class for all toolkit errors."""


# -- geometry -----------------------------------------------------------------

class NonPositiveDepth(PointLocError):
    """Projection or back-projection requested at depth <= 0."""


class NearPiAmbiguity(PointLocError):
    """Rotation log requested too close to the pi-angle ambiguity."""


class OutOfBounds(PointLocError):
    """Sample position falls outside the image grid."""


# -- point field --------------------------------------------------------------

class EmptyCloud(PointLocError):
    """A point field needs at least one point."""


class NonFiniteCoordinate(PointLocError):
    """Point positions must be finite."""


class AllFiltered(PointLocError):
    """Score filtering removed every point; caller should fall back."""


# -- rendering / losses -------------------------------------------------------

class DimensionMismatch(PointLocError):
    """Arrays that must share a shape do not."""


class EmptyMaskWarning(UserWarning):
    """Loss evaluated under a mask that selects no pixels."""


# -- structure localizer ------------------------------------------------------

class NoMatches(PointLocError):
    """Fewer correspondences survived matching than a pose solve needs."""


class DegenerateConfiguration(PointLocError):
    """Minimal solver input is collinear or coincident."""


class NoConsensus(PointLocError):
    """RANSAC found no hypothesis with enough inliers."""


# -- warp refinement ----------------------------------------------------------

class BehindCamera(PointLocError):
    """Warped point has non-positive depth in the target camera."""


class TooFewValid(PointLocError):
    """Reference view has too few valid-depth pixels to sample."""


class NoContributingSamples(PointLocError):
    """Every warped sample fell out of bounds or behind the camera."""


# -- training -----------------------------------------------------------------

class DivergedLoss(PointLocError):
    """Training loss went non-finite or blew past its initial value."""


# -- file formats -------------------------------------------------------------

class FormatError(PointLocError):
    """Base for binary/text format problems; carries a byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagic(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(FormatError):
    """File declares an unsupported format version."""


class TruncatedFile(FormatError):
    """File ends before its declared payload."""
