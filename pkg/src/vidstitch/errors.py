"""Exception types raised across the stitching pipeline."""


class StitchError(Exception):
    """Base class for all stitching failures."""


class InsufficientDataError(StitchError):
    """Too few correspondences/matches to run an estimation."""


class DegenerateEstimationError(StitchError):
    """Input configuration admits no usable transform (collinear points,
    singular or non-invertible matrices, degenerate coordinate axes)."""


class CanvasOverflowError(StitchError):
    """Computed output canvas exceeds the configured maximum area."""


class NoInliersError(StitchError):
    """Inlier selection produced an empty set."""


class NoOverlapError(StitchError):
    """The two warped images share no valid pixels."""


class NoPathError(StitchError):
    """Seam anchors are not connected through the overlap mask."""


class AlignmentError(StitchError):
    """End-to-end alignment failed for a frame pair."""


class MatchFileError(StitchError):
    """Malformed match-file content."""


class FrameIOError(StitchError):
    """Frame could not be read or written."""


class ConfigError(StitchError):
    """Malformed configuration or scene file."""
