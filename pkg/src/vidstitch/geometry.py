"""Homography algebra and estimation.

DLT / Moving DLT homography fits, local-global integration into a per-cell
warp field, canvas computation, and inverse-mapped bilinear warping.
Points are (x, y) pixel coordinates; homographies are 3x3 numpy arrays
acting on homogeneous (x, y, 1) columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange
from scipy import ndimage

from .errors import CanvasOverflowError, DegenerateEstimationError, InsufficientDataError

# Relative thresholds for rank / invertibility decisions on unit-norm matrices.
_RANK_EPS = 1e-10
_DET_EPS = 1e-12


@dataclass(frozen=True)
class WeightProfile:
    """Moving DLT weighting: scale sigma (pixels) and floor gamma in [0, 1]."""

    sigma: float
    gamma: float = 0.01

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")


@dataclass
class WarpField:
    """Per-grid-cell homography table over a source image.

    grid[r, c] is the integrated 3x3 homography for the cell covering
    source pixels [c*cell_size, (c+1)*cell_size) x [r*cell_size, ...).
    """

    grid: np.ndarray            # (rows, cols, 3, 3)
    cell_size: int
    source_extent: tuple[int, int]   # (width, height)
    rotation_theta: float
    u_min: float
    u_max: float
    flipped: bool = False       # integration axis orientation was reversed
    fallback_cells: int = 0     # cells that fell back to the global estimate

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[0], self.grid.shape[1]

    def cell_index(self, x: float, y: float) -> tuple[int, int]:
        """Grid cell owning source position (x, y), clipped to the grid."""
        rows, cols = self.shape
        c = min(max(int(x // self.cell_size), 0), cols - 1)
        r = min(max(int(y // self.cell_size), 0), rows - 1)
        return r, c

    def homography_at(self, x: float, y: float) -> np.ndarray:
        r, c = self.cell_index(x, y)
        return self.grid[r, c]


@dataclass(frozen=True)
class CanvasExtent:
    """Integer output raster placed at `offset` in warped coordinates."""

    offset: tuple[float, float]
    width: int
    height: int


@dataclass
class SamplingGrid:
    """Precomputed inverse-mapped bilinear sample positions for one warp."""

    ix: np.ndarray      # (H, W) int32, left/top source sample index
    iy: np.ndarray
    fx: np.ndarray      # (H, W) float32 fractional offsets
    fy: np.ndarray
    mask: np.ndarray    # (H, W) bool, True where the source covers the pixel


@dataclass
class WarpedImage:
    pixels: np.ndarray  # (H, W) or (H, W, C) float32
    mask: np.ndarray    # (H, W) bool


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map (..., 2) points through H with perspective division."""
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    p = np.atleast_2d(pts)
    ones = np.ones((p.shape[0], 1))
    q = np.hstack([p, ones]) @ H.T
    with np.errstate(divide="ignore", invalid="ignore"):
        out = q[:, :2] / q[:, 2:3]
    return out[0] if single else out


def normalize_homography(H: np.ndarray) -> np.ndarray:
    """Scale to unit Frobenius norm with the largest-magnitude entry positive."""
    H = np.asarray(H, dtype=np.float64)
    n = np.linalg.norm(H)
    if not np.isfinite(n) or n < _DET_EPS:
        raise DegenerateEstimationError("homography has (near-)zero norm")
    H = H / n
    k = np.argmax(np.abs(H))
    if H.flat[k] < 0:
        H = -H
    return H


def _check_invertible(H: np.ndarray, what: str) -> np.ndarray:
    if abs(np.linalg.det(H / np.linalg.norm(H))) < _DET_EPS:
        raise DegenerateEstimationError(f"{what} is not invertible")
    return H


def normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hartley conditioning: zero centroid, mean distance sqrt(2).

    Returns the transformed points and the 3x3 similarity T applied.
    """
    pts = np.asarray(pts, dtype=np.float64)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = np.mean(np.linalg.norm(centered, axis=1))
    if mean_dist < 1e-12:
        raise DegenerateEstimationError("all points coincident")
    s = math.sqrt(2.0) / mean_dist
    T = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    return centered * s, T


def _check_not_collinear(pts: np.ndarray) -> None:
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] / sv[0] < 1e-9:
        raise DegenerateEstimationError("point set is collinear or coincident")


def normalize_correspondences(
    src: np.ndarray, dst: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Condition both sides of a correspondence set for DLT.

    Returns (src_n, dst_n, T_src, T_dst) with each side having zero
    centroid and mean distance sqrt(2).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("src and dst must both be (N, 2)")
    if src.shape[0] < 4:
        raise InsufficientDataError(f"need >= 4 correspondences, got {src.shape[0]}")
    _check_not_collinear(src)
    _check_not_collinear(dst)
    src_n, T_src = normalize_points(src)
    dst_n, T_dst = normalize_points(dst)
    return src_n, dst_n, T_src, T_dst


def build_design_rows(src_pt: np.ndarray, dst_pt: np.ndarray) -> np.ndarray:
    """Two linearly independent rows of the cross-product linearization.

    For any H with dst ~ H @ src, rows @ H.ravel() == 0.
    """
    x, y = float(src_pt[0]), float(src_pt[1])
    xp, yp = float(dst_pt[0]), float(dst_pt[1])
    return np.array([
        [0.0, 0.0, 0.0, -x, -y, -1.0, yp * x, yp * y, yp],
        [x, y, 1.0, 0.0, 0.0, 0.0, -xp * x, -xp * y, -xp],
    ])


def build_design_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Stacked (2N, 9) design matrix, two rows per correspondence."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = src.shape[0]
    x, y = src[:, 0], src[:, 1]
    xp, yp = dst[:, 0], dst[:, 1]
    zeros = np.zeros(n)
    ones = np.ones(n)
    rows1 = np.stack([zeros, zeros, zeros, -x, -y, -ones, yp * x, yp * y, yp], axis=1)
    rows2 = np.stack([x, y, ones, zeros, zeros, zeros, -xp * x, -xp * y, -xp], axis=1)
    A = np.empty((2 * n, 9))
    A[0::2] = rows1
    A[1::2] = rows2
    return A


def _solve_dlt(A: np.ndarray) -> np.ndarray:
    """Unit-norm minimizer of ||A h||^2 via SVD, with a rank check."""
    _, s, Vt = np.linalg.svd(A)
    if s[0] < 1e-12 or s[7] / s[0] < _RANK_EPS:
        raise DegenerateEstimationError("degenerate configuration: design rank < 8")
    return Vt[-1].reshape(3, 3)


def estimate_global_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares homography over all correspondences (conditioned DLT).

    Returns the unit-Frobenius-norm 3x3 matrix minimizing the algebraic
    error over the full set, denormalized to input coordinates.
    """
    src_n, dst_n, T_src, T_dst = normalize_correspondences(src, dst)
    A = build_design_matrix(src_n, dst_n)
    Hn = _solve_dlt(A)
    H = np.linalg.inv(T_dst) @ Hn @ T_src
    return _check_invertible(normalize_homography(H), "estimated homography")


def moving_dlt_weight(p_star: np.ndarray, p_i: np.ndarray, profile: WeightProfile) -> float:
    """Gaussian proximity weight with floor: max(exp(-d^2/sigma^2), gamma)."""
    d2 = float(np.sum((np.asarray(p_star, dtype=np.float64) - np.asarray(p_i, dtype=np.float64)) ** 2))
    return max(math.exp(-d2 / profile.sigma**2), profile.gamma)


def moving_dlt_weights(p_star: np.ndarray, pts: np.ndarray, profile: WeightProfile) -> np.ndarray:
    """Vectorized weights of all points relative to evaluation position p_star."""
    d2 = np.sum((np.asarray(pts, dtype=np.float64) - np.asarray(p_star, dtype=np.float64)) ** 2, axis=-1)
    return np.maximum(np.exp(-d2 / profile.sigma**2), profile.gamma)


def estimate_local_homography(
    src: np.ndarray, dst: np.ndarray, p_star: np.ndarray, profile: WeightProfile
) -> np.ndarray:
    """Moving DLT fit at p_star: minimize ||W A h||^2 with proximity weights.

    Weights are computed from distances in the original source coordinates;
    with all weights equal this reduces to the global estimate.
    """
    src = np.asarray(src, dtype=np.float64)
    src_n, dst_n, T_src, T_dst = normalize_correspondences(src, dst)
    A = build_design_matrix(src_n, dst_n)
    w = moving_dlt_weights(p_star, src, profile)
    A = A * np.repeat(w, 2)[:, None]
    Hn = _solve_dlt(A)
    H = np.linalg.inv(T_dst) @ Hn @ T_src
    return _check_invertible(normalize_homography(H), "local homography")


def integration_weight(u: float, u_min: float, u_max: float) -> float:
    """Linear ramp (u - u_min)/(u_max - u_min), clamped to [0, 1]."""
    if u_max <= u_min:
        raise DegenerateEstimationError("degenerate integration axis: u_min >= u_max")
    return min(max((u - u_min) / (u_max - u_min), 0.0), 1.0)


def _sign_align(H: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Flip H's sign if its largest-magnitude entry of ref disagrees in sign."""
    k = np.argmax(np.abs(ref))
    if H.flat[k] * ref.flat[k] < 0:
        return -H
    return H


def integrate_homographies(
    H_l: np.ndarray, H_g: np.ndarray, w: float, anchor: np.ndarray | None = None
) -> np.ndarray:
    """Entrywise blend w*H_l + (1-w)*H_g on consistently scaled representatives.

    Without an anchor the representatives are unit Frobenius norm with signs
    aligned on the largest-magnitude entry. With an anchor point, each is
    rescaled so its projective denominator equals 1 there; the blended
    denominator is then a convex combination of positive values near the
    anchor, which keeps the horizon out of the blended warp's domain.
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"integration weight must be in [0, 1], got {w}")
    Hl = normalize_homography(H_l)
    Hg = normalize_homography(H_g)
    if anchor is None:
        Hl = _sign_align(Hl, Hg)
    else:
        ax, ay = float(anchor[0]), float(anchor[1])
        scaled = []
        for M in (Hl, Hg):
            d = M[2, 0] * ax + M[2, 1] * ay + M[2, 2]
            if abs(d) < _DET_EPS:
                raise DegenerateEstimationError("blend anchor lies on a horizon line")
            scaled.append(M / d)
        Hl, Hg = scaled
    H = w * Hl + (1.0 - w) * Hg
    H = normalize_homography(H)
    return _check_invertible(H, "blended homography")


def rotation_angle(H_g: np.ndarray) -> float:
    """Integration axis angle from the projective row: atan2(h8, h7) folded
    to (-pi/2, pi/2]; zero for affine matrices (h7 == h8 == 0)."""
    h7, h8 = H_g[2, 0], H_g[2, 1]
    if h7 == 0.0 and h8 == 0.0:
        return 0.0
    theta = math.atan2(h8, h7)
    if theta > math.pi / 2:
        theta -= math.pi
    elif theta <= -math.pi / 2:
        theta += math.pi
    return theta


def compensation_transform(H: np.ndarray, H_l: np.ndarray) -> np.ndarray:
    """R = H @ inv(H_l): applied to the second image so its local warp
    reproduces the integrated warp on the overlap. Not renormalized, so
    R @ H_l == H holds entrywise."""
    _check_invertible(np.asarray(H_l, dtype=np.float64), "local homography")
    return np.asarray(H, dtype=np.float64) @ np.linalg.inv(H_l)


def _rotate_u(pts: np.ndarray, theta: float) -> np.ndarray:
    """u coordinate of points after rotating the axes by theta."""
    return pts[..., 0] * math.cos(theta) + pts[..., 1] * math.sin(theta)


def _cell_grid(extent: tuple[int, int], cell_size: int) -> tuple[int, int]:
    w, h = extent
    return (h + cell_size - 1) // cell_size, (w + cell_size - 1) // cell_size


def _cell_rects(extent: tuple[int, int], cell_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell pixel rects as (rows, cols, 4) [x0, y0, x1, y1] plus centers."""
    w, h = extent
    rows, cols = _cell_grid(extent, cell_size)
    c = np.arange(cols)
    r = np.arange(rows)
    x0 = c * cell_size
    x1 = np.minimum((c + 1) * cell_size, w) - 1
    y0 = r * cell_size
    y1 = np.minimum((r + 1) * cell_size, h) - 1
    rects = np.empty((rows, cols, 4))
    rects[..., 0] = x0[None, :]
    rects[..., 1] = y0[:, None]
    rects[..., 2] = x1[None, :]
    rects[..., 3] = y1[:, None]
    centers = np.empty((rows, cols, 2))
    centers[..., 0] = (x0 + x1)[None, :] / 2.0
    centers[..., 1] = (y0 + y1)[:, None] / 2.0
    return rects, centers


def build_warp_field(
    extent: tuple[int, int],
    src: np.ndarray,
    dst: np.ndarray,
    H_g: np.ndarray,
    profile: WeightProfile,
    cell_size: int = 16,
    orientation: str = "auto",
) -> WarpField:
    """Integrated local/global homography per grid cell over the source image.

    Each cell gets a Moving DLT fit evaluated at the cell center, blended
    with the global estimate by the rotated-axis ramp weight. `orientation`
    controls the ramp direction: "auto" puts full local weight on the
    correspondence-dense (overlap) side, "keep"/"flip" force either sense.
    Cells whose local fit fails fall back to H_g (counted in the result).
    """
    if cell_size < 1:
        raise ValueError("cell_size must be >= 1")
    if orientation not in ("auto", "keep", "flip"):
        raise ValueError(f"unknown orientation {orientation!r}")
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    Hg = normalize_homography(H_g)
    src_n, dst_n, T_src, T_dst = normalize_correspondences(src, dst)
    n = src.shape[0]

    # Per-correspondence 9x9 normal-equation blocks in conditioned coords.
    A = build_design_matrix(src_n, dst_n).reshape(n, 2, 9)
    B = np.einsum("nki,nkj->nij", A, A)

    rects, centers = _cell_rects(extent, cell_size)
    rows, cols = centers.shape[:2]
    flat_centers = centers.reshape(-1, 2)

    # Weighted normal matrices for every cell at once, then batched eigh.
    d2 = np.sum((flat_centers[:, None, :] - src[None, :, :]) ** 2, axis=2)
    wgt = np.maximum(np.exp(-d2 / profile.sigma**2), profile.gamma)
    M = np.einsum("cn,nij->cij", wgt**2, B)
    eigvals, eigvecs = np.linalg.eigh(M)
    h = eigvecs[:, :, 0]

    T_dst_inv = np.linalg.inv(T_dst)
    H_local = np.einsum("ij,cjk,kl->cil", T_dst_inv, h.reshape(-1, 3, 3), T_src)

    fallback = 0
    locals_ = np.empty_like(H_local)
    for i in range(H_local.shape[0]):
        ok = eigvals[i, 1] > max(eigvals[i, -1], 1e-300) * 1e-14
        if ok:
            try:
                Hc = normalize_homography(H_local[i])
                _check_invertible(Hc, "cell homography")
                locals_[i] = _sign_align(Hc, Hg)
                continue
            except DegenerateEstimationError:
                pass
        locals_[i] = Hg
        fallback += 1

    theta = rotation_angle(Hg)

    # u statistics over the source pixel lattice warped by its own cell's
    # local homography (cell corners bound the warped coordinate set).
    corners = np.stack([
        rects[..., [0, 1]], rects[..., [2, 1]],
        rects[..., [0, 3]], rects[..., [2, 3]],
    ], axis=2).reshape(-1, 4, 2)
    ones = np.ones((corners.shape[0], 4, 1))
    hom = np.concatenate([corners, ones], axis=2)
    mapped = np.einsum("cij,ckj->cki", locals_, hom)
    warped_corners = mapped[..., :2] / mapped[..., 2:3]
    u_all = _rotate_u(warped_corners, theta)
    u_min = float(np.min(u_all))
    u_max = float(np.max(u_all))
    if not np.isfinite(u_min) or not np.isfinite(u_max) or u_max - u_min < 1e-9:
        raise DegenerateEstimationError("degenerate integration axis over warp")

    center_mapped = np.einsum("cij,cj->ci", locals_, np.hstack([flat_centers, np.ones((len(flat_centers), 1))]))
    u_centers = _rotate_u(center_mapped[:, :2] / center_mapped[:, 2:3], theta)

    if orientation == "auto":
        u_inliers = float(np.mean(_rotate_u(apply_homography(Hg, src), theta)))
        flip = (u_inliers - u_min) < (u_max - u_inliers)
    else:
        flip = orientation == "flip"

    w_cells = np.clip((u_centers - u_min) / (u_max - u_min), 0.0, 1.0)
    if flip:
        w_cells = 1.0 - w_cells

    grid = np.empty((rows * cols, 3, 3))
    for i in range(grid.shape[0]):
        try:
            grid[i] = integrate_homographies(
                locals_[i], Hg, float(w_cells[i]), anchor=flat_centers[i]
            )
        except DegenerateEstimationError:
            grid[i] = Hg
            fallback += 1

    return WarpField(
        grid=grid.reshape(rows, cols, 3, 3),
        cell_size=cell_size,
        source_extent=(extent[0], extent[1]),
        rotation_theta=theta,
        u_min=u_min,
        u_max=u_max,
        flipped=bool(flip),
        fallback_cells=fallback,
    )


def _extent_corners(extent: tuple[int, int]) -> np.ndarray:
    w, h = extent
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])


def _warped_corner_set(extent: tuple[int, int], warp: WarpField | np.ndarray) -> np.ndarray:
    if isinstance(warp, WarpField):
        rects, _ = _cell_rects(extent, warp.cell_size)
        rows, cols = rects.shape[:2]
        pts = []
        for r in range(rows):
            for c in range(cols):
                x0, y0, x1, y1 = rects[r, c]
                cell_pts = np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])
                pts.append(apply_homography(warp.grid[r, c], cell_pts))
        return np.concatenate(pts, axis=0)
    return apply_homography(np.asarray(warp, dtype=np.float64), _extent_corners(extent))


def compute_canvas(
    extent_a: tuple[int, int],
    warp_a: WarpField | np.ndarray,
    extent_b: tuple[int, int],
    warp_b: WarpField | np.ndarray,
    max_area: int = 64_000_000,
) -> CanvasExtent:
    """Bounding box of both warped extents, with integer offset so every
    warped coordinate is non-negative on the canvas."""
    corners = np.concatenate([
        _warped_corner_set(extent_a, warp_a),
        _warped_corner_set(extent_b, warp_b),
    ], axis=0)
    if not np.all(np.isfinite(corners)):
        raise CanvasOverflowError("warped corners are not finite")

    def snap(v):
        # round-off from estimated warps must not inflate the canvas
        r = round(v)
        return float(r) if abs(v - r) < 1e-6 else v

    x0 = math.floor(snap(corners[:, 0].min()))
    y0 = math.floor(snap(corners[:, 1].min()))
    width = math.ceil(snap(corners[:, 0].max())) - x0 + 1
    height = math.ceil(snap(corners[:, 1].max())) - y0 + 1
    if width * height > max_area:
        raise CanvasOverflowError(f"canvas {width}x{height} exceeds max area {max_area}")
    return CanvasExtent(offset=(float(x0), float(y0)), width=width, height=height)


def _inverse_sample_coords(Hinv: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    denom = Hinv[2, 0] * xs + Hinv[2, 1] * ys + Hinv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (Hinv[0, 0] * xs + Hinv[0, 1] * ys + Hinv[0, 2]) / denom
        sy = (Hinv[1, 0] * xs + Hinv[1, 1] * ys + Hinv[1, 2]) / denom
    bad = ~np.isfinite(sx) | ~np.isfinite(sy)
    if np.any(bad):
        sx = np.where(bad, -1e9, sx)
        sy = np.where(bad, -1e9, sy)
    return sx, sy


def build_sampling_grid(
    warp: WarpField | np.ndarray,
    source_extent: tuple[int, int],
    canvas: CanvasExtent,
) -> SamplingGrid:
    """Inverse-map every canvas pixel to a source sample position.

    For a WarpField, each cell's corners are forward-mapped to find the
    canvas pixels it may own; ownership is confirmed by inverse-mapping
    back into the cell's source rect. Overlapping claims at cell borders
    resolve to the lowest (row, col) cell.
    """
    w, h = source_extent
    off_x, off_y = canvas.offset
    eps = 1e-6  # absorbs round-off at extent borders
    sx = np.full((canvas.height, canvas.width), -1e9, dtype=np.float64)
    sy = np.full((canvas.height, canvas.width), -1e9, dtype=np.float64)

    if isinstance(warp, WarpField):
        rects, _ = _cell_rects(source_extent, warp.cell_size)
        rows, cols = rects.shape[:2]
        claimed = np.zeros((canvas.height, canvas.width), dtype=bool)
        fillable = None
        # The field is only piecewise projective: neighboring forward-mapped
        # quads separate by the size of the cell-border discontinuity, and
        # pixels in that gap confirm through no cell at the tight margin.
        # The second pass lets adjacent cells claim gap pixels with a full
        # cell of slack, restricted to holes enclosed by the first pass so
        # the outer footprint boundary stays exact.
        for slack in (0.0, float(warp.cell_size)):
            if slack:
                fillable = ndimage.binary_fill_holes(claimed) & ~claimed
                if not fillable.any():
                    break
            for r in range(rows):
                for c in range(cols):
                    x0, y0, x1, y1 = rects[r, c]
                    H = warp.grid[r, c]
                    cell_pts = np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])
                    mapped = apply_homography(H, cell_pts)
                    if not np.all(np.isfinite(mapped)):
                        continue
                    # pad the bbox: projective edges bow slightly outside the
                    # quad, and the slack widens the claimable ring
                    pad = 2 + math.ceil(slack)
                    cx0 = max(math.floor(mapped[:, 0].min() - off_x) - pad, 0)
                    cy0 = max(math.floor(mapped[:, 1].min() - off_y) - pad, 0)
                    cx1 = min(math.ceil(mapped[:, 0].max() - off_x) + pad, canvas.width - 1)
                    cy1 = min(math.ceil(mapped[:, 1].max() - off_y) + pad, canvas.height - 1)
                    if cx1 < cx0 or cy1 < cy0:
                        continue
                    xs, ys = np.meshgrid(
                        np.arange(cx0, cx1 + 1, dtype=np.float64) + off_x,
                        np.arange(cy0, cy1 + 1, dtype=np.float64) + off_y,
                    )
                    bx, by = _inverse_sample_coords(np.linalg.inv(H), xs, ys)
                    free = ~claimed[cy0:cy1 + 1, cx0:cx1 + 1]
                    if fillable is not None:
                        free &= fillable[cy0:cy1 + 1, cx0:cx1 + 1]
                        if not free.any():
                            continue
                    in_x = (bx >= x0 - slack - eps) & (bx <= x1 + 1.0 + slack)
                    in_y = (by >= y0 - slack - eps) & (by <= y1 + 1.0 + slack)
                    owns = in_x & in_y & free
                    # final column/row of the grid also owns up to the extent edge
                    if c == cols - 1:
                        owns |= (bx > x1) & (bx <= w - 1.0 + eps) & in_y & free
                    if r == rows - 1:
                        owns |= (by > y1) & (by <= h - 1.0 + eps) & in_x & free
                    sub_y, sub_x = np.nonzero(owns)
                    claimed[cy0 + sub_y, cx0 + sub_x] = True
                    sx[cy0 + sub_y, cx0 + sub_x] = bx[sub_y, sub_x]
                    sy[cy0 + sub_y, cx0 + sub_x] = by[sub_y, sub_x]
    else:
        H = np.asarray(warp, dtype=np.float64)
        xs, ys = np.meshgrid(
            np.arange(canvas.width, dtype=np.float64) + off_x,
            np.arange(canvas.height, dtype=np.float64) + off_y,
        )
        sx, sy = _inverse_sample_coords(np.linalg.inv(H), xs, ys)

    mask = (sx >= -eps) & (sx <= w - 1.0 + eps) & (sy >= -eps) & (sy <= h - 1.0 + eps)
    sxc = np.clip(sx, 0.0, w - 1.0)
    syc = np.clip(sy, 0.0, h - 1.0)
    ix = np.minimum(sxc.astype(np.int32), w - 2) if w > 1 else np.zeros_like(sxc, dtype=np.int32)
    iy = np.minimum(syc.astype(np.int32), h - 2) if h > 1 else np.zeros_like(syc, dtype=np.int32)
    fx = (sxc - ix).astype(np.float32)
    fy = (syc - iy).astype(np.float32)
    return SamplingGrid(ix=ix, iy=iy, fx=fx, fy=fy, mask=mask)


@njit(cache=True, parallel=True)
def _bilinear_gather(flat, w, h, ix, iy, fx, fy, mask, out):
    H, W = ix.shape
    C = flat.shape[1]
    dx = 1 if w > 1 else 0
    dy = w if h > 1 else 0
    one = np.float32(1.0)
    for r in prange(H):
        for c in range(W):
            if not mask[r, c]:
                for k in range(C):
                    out[r, c, k] = 0.0
                continue
            i00 = iy[r, c] * w + ix[r, c]
            gx = fx[r, c]
            gy = fy[r, c]
            wx = one - gx
            wy = one - gy
            for k in range(C):
                top = flat[i00, k] * wx + flat[i00 + dx, k] * gx
                bot = flat[i00 + dy, k] * wx + flat[i00 + dy + dx, k] * gx
                out[r, c, k] = top * wy + bot * gy


def sample_bilinear(image: np.ndarray, grid: SamplingGrid) -> WarpedImage:
    """Gather the image through a sampling grid with bilinear interpolation."""
    img = np.asarray(image)
    if img.dtype != np.float32:
        img = img.astype(np.float32)
    chans = img if img.ndim == 3 else img[..., None]
    h, w = chans.shape[:2]
    flat = np.ascontiguousarray(chans.reshape(-1, chans.shape[2]))
    out = np.empty(grid.ix.shape + (chans.shape[2],), dtype=np.float32)
    _bilinear_gather(
        flat, w, h,
        np.ascontiguousarray(grid.ix), np.ascontiguousarray(grid.iy),
        np.ascontiguousarray(grid.fx), np.ascontiguousarray(grid.fy),
        np.ascontiguousarray(grid.mask), out,
    )
    if image.ndim == 2:
        out = out[..., 0]
    return WarpedImage(pixels=out, mask=grid.mask.copy())


def warp_image(
    image: np.ndarray,
    warp: WarpField | np.ndarray,
    canvas: CanvasExtent,
    grid: SamplingGrid | None = None,
) -> WarpedImage:
    """Warp an image onto the canvas by inverse-mapped bilinear resampling.

    Pass a precomputed `grid` to skip rebuilding the inverse map when the
    warp is reused across frames.
    """
    img = np.asarray(image)
    extent = (img.shape[1], img.shape[0])
    if grid is None:
        grid = build_sampling_grid(warp, extent, canvas)
    return sample_bilinear(img, grid)
