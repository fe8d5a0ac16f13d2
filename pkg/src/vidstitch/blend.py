"""Multi-band blending of two warped images across a seam.

Each image is decomposed into a Laplacian pyramid, the per-level bands are
mixed with a Gaussian-smoothed weight mask derived from the seam, and the
result is collapsed back. Low frequencies blend over wide transitions and
high frequencies over narrow ones, which hides the seam without ghosting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import CanvasExtent, WarpedImage
from .seam import Seam

_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass
class Pyramid:
    """Image decomposition as a list of rasters, finest first."""

    levels: list
    kind: str
    level_count: int

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "laplacian"):
            raise ValueError(f"unknown pyramid kind {self.kind!r}")
        if self.level_count != len(self.levels) or self.level_count < 1:
            raise ValueError("level_count must match levels and be >= 1")


@dataclass
class WeightMask:
    """Per-pixel share of the first image, in [0, 1] on the canvas."""

    w: np.ndarray


def _as_real(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _check_levels(shape: tuple, levels: int) -> None:
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    need = 1 << (levels - 1)
    if shape[0] < need or shape[1] < need:
        raise ValueError(
            f"image dims {shape[:2]} too small for {levels} levels "
            f"(need >= {need})"
        )


def _smooth(image: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(image, _KERNEL, axis=0, mode="mirror")
    return ndimage.correlate1d(out, _KERNEL, axis=1, mode="mirror")


def _downsample(image: np.ndarray) -> np.ndarray:
    # decimate rows between the two separable passes; the column filter is
    # row-independent so the kept rows come out identical
    out = ndimage.correlate1d(image, _KERNEL, axis=0, mode="mirror")[::2]
    return ndimage.correlate1d(out, _KERNEL, axis=1, mode="mirror")[:, ::2]


def _upsample_axis(arr: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Zero-insertion upsample along axis to length n, convolved with the
    doubled binomial kernel: even taps (1,6,1)/8, odd taps (4,4)/8."""
    a = np.moveaxis(arr, axis, 0)
    m = a.shape[0]
    if m != (n + 1) // 2:
        raise ValueError(f"cannot upsample {m} samples to length {n}")
    out = np.empty((n,) + a.shape[1:], dtype=arr.dtype)
    if m == 1:
        out[:] = a[0]
        return np.moveaxis(out, 0, axis)

    prev = np.empty_like(a)
    prev[1:] = a[:-1]
    prev[0] = a[1]          # mirror border
    nxt = np.empty_like(a)
    nxt[:-1] = a[1:]
    nxt[-1] = a[-2]

    even = (prev + 6.0 * a + nxt) / 8.0
    out[0::2] = even[: (n + 1) // 2]
    odd = (a[:-1] + a[1:]) / 2.0
    k = n // 2              # number of odd output positions
    if k <= m - 1:
        out[1::2] = odd[:k]
    else:
        # n even: the tail sample lies past the last coarse sample; replicate
        # the edge so monotone profiles stay monotone through the chain
        out[1:2 * (m - 1):2] = odd
        out[-1] = a[-1]
    return np.moveaxis(out, 0, axis)


def upsample(image: np.ndarray, shape: tuple) -> np.ndarray:
    """Resize a decimated raster back to the given (height, width)."""
    out = _upsample_axis(image, shape[0], 0)
    return _upsample_axis(out, shape[1], 1)


def build_gaussian_pyramid(image: np.ndarray, levels: int) -> Pyramid:
    """Repeated binomial smoothing and 2x decimation, mirror borders."""
    arr = _as_real(image)
    _check_levels(arr.shape, levels)
    out = [arr]
    for _ in range(levels - 1):
        out.append(_downsample(out[-1]))
    return Pyramid(levels=out, kind="gaussian", level_count=levels)


def build_laplacian_pyramid(image: np.ndarray, levels: int) -> Pyramid:
    """Band-pass levels G_k - upsample(G_{k+1}); coarsest level is the
    Gaussian residual, so the pyramid collapses back to the input exactly."""
    gauss = build_gaussian_pyramid(image, levels)
    out = []
    for k in range(levels - 1):
        g = gauss.levels[k]
        out.append(g - upsample(gauss.levels[k + 1], g.shape[:2]))
    out.append(gauss.levels[-1])
    return Pyramid(levels=out, kind="laplacian", level_count=levels)


def blend_pyramids(
    lap_a: Pyramid, lap_b: Pyramid, weight: WeightMask, levels: int
) -> Pyramid:
    """Per-level convex mix of two Laplacian pyramids, weighted by the
    Gaussian pyramid of the seam mask."""
    if lap_a.level_count < levels or lap_b.level_count < levels:
        raise ValueError("pyramids have fewer levels than requested")
    for k in range(levels):
        if lap_a.levels[k].shape != lap_b.levels[k].shape:
            raise ValueError(f"pyramid shapes differ at level {k}")
    if weight.w.shape[:2] != lap_a.levels[0].shape[:2]:
        raise ValueError("weight mask does not match pyramid base level")

    # the weight pyramid follows the band dtype so float32 bands mix without
    # promotion to float64
    wdtype = np.result_type(lap_a.levels[0].dtype, lap_b.levels[0].dtype, np.float32)
    gw = build_gaussian_pyramid(np.asarray(weight.w, dtype=wdtype), levels)
    out = []
    for k in range(levels):
        w = gw.levels[k]
        la, lb = lap_a.levels[k], lap_b.levels[k]
        if la.ndim == 3:
            w = w[..., None]
        out.append(w * la + (1.0 - w) * lb)
    return Pyramid(levels=out, kind="laplacian", level_count=levels)


def collapse_pyramid(lap: Pyramid, clip: tuple | None = None) -> np.ndarray:
    """Upsample-and-add from coarsest to finest; clamp only at the end."""
    if lap.kind != "laplacian":
        raise ValueError("collapse requires a laplacian pyramid")
    out = lap.levels[-1]
    for k in range(lap.level_count - 2, -1, -1):
        out = upsample(out, lap.levels[k].shape[:2]) + lap.levels[k]
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return out


def seam_to_weight_mask(
    seam: Seam,
    canvas: CanvasExtent,
    mask_a: np.ndarray,
    mask_b: np.ndarray,
) -> WeightMask:
    """Binary side-of-seam labeling: 1 left of the seam (image A), 0 on and
    right of it. The seam extends vertically from its anchors to the canvas
    edges; regions where only one mask is valid take that image regardless.
    """
    h, w = mask_a.shape
    path = seam.path
    ys = path[:, 1]
    xs = path[:, 0]
    boundary = np.empty(h, dtype=np.int64)
    y_top, y_bot = int(ys.min()), int(ys.max())
    # leftmost seam column per row; rows off the seam use the anchor column
    lo = np.full(h, np.iinfo(np.int64).max)
    np.minimum.at(lo, ys, xs)
    boundary[y_top:y_bot + 1] = lo[y_top:y_bot + 1]
    boundary[:y_top] = xs[np.argmin(ys)]
    boundary[y_bot + 1:] = xs[np.argmax(ys)]

    w_mask = (np.arange(w)[None, :] < boundary[:, None]).astype(np.float64)
    only_a = mask_a & ~mask_b
    only_b = mask_b & ~mask_a
    w_mask[only_a] = 1.0
    w_mask[only_b] = 0.0
    return WeightMask(w=w_mask)


def fill_indices(mask: np.ndarray):
    """Nearest-valid source coordinates for every out-of-mask pixel.

    Returns (invalid, iy, ix) where invalid is the boolean complement of the
    mask and iy/ix index its nearest valid pixels, or None when the mask is
    uniform. The result depends only on the mask, so it can be computed once
    and reused across frames that share a warp."""
    if mask.all() or not mask.any():
        return None
    _, (iy, ix) = ndimage.distance_transform_edt(~mask, return_indices=True)
    inv = ~mask
    return inv, iy[inv], ix[inv]


def fill_invalid(image: np.ndarray, mask: np.ndarray, indices=None) -> np.ndarray:
    """Replace pixels outside the mask with their nearest valid pixel.

    Pyramids built on the raw warped rasters pull the mask border's black
    exterior into the blend; nearest-valid extension suppresses the halo.
    Pass a precomputed fill_indices result to skip the distance transform.
    """
    arr = _as_real(image)
    if mask.all():
        return arr
    if not mask.any():
        return arr
    if indices is None:
        indices = fill_indices(mask)
    inv, iy, ix = indices
    out = arr.copy()
    out[inv] = arr[iy, ix]
    return out


def blend_warped(
    warped_a: WarpedImage,
    warped_b: WarpedImage,
    seam: Seam,
    canvas: CanvasExtent,
    levels: int,
    clip: tuple | None = None,
    fill_a=None,
    fill_b=None,
) -> np.ndarray:
    """Full multi-band composite of two warped images across a seam.

    fill_a / fill_b take precomputed fill_indices results for the two masks
    when the caller reuses one warp across many frames."""
    weight = seam_to_weight_mask(seam, canvas, warped_a.mask, warped_b.mask)
    a = fill_invalid(warped_a.pixels, warped_a.mask, indices=fill_a)
    b = fill_invalid(warped_b.pixels, warped_b.mask, indices=fill_b)
    lap_a = build_laplacian_pyramid(a, levels)
    lap_b = build_laplacian_pyramid(b, levels)
    blended = blend_pyramids(lap_a, lap_b, weight, levels)
    return collapse_pyramid(blended, clip=clip)
