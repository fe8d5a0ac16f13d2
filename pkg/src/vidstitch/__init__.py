"""Wide-angle / fisheye video stitching: alignment, seam cutting, blending."""

__version__ = "0.1.0"
