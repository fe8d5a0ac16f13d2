"""Seam computation over the overlap of two warped images.

The seam is a minimal-cost path from a top anchor to a bottom anchor,
monotone in rows with single-direction horizontal runs within a row
(five move directions total). Costs combine gradient smoothness and
gradient difference; a temporal penalty pulls the seam toward the
previous frame's seam.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import NoOverlapError, NoPathError
from .geometry import WarpedImage

_INF = np.inf


@dataclass
class OverlapRegion:
    """Intersection of two warped-image masks on a shared canvas.

    bounds is (x0, y0, width, height) in canvas coordinates; mask is the
    bool sub-raster over bounds. Anchors are canvas (x, y) points on the
    topmost and bottommost mask rows.
    """

    mask: np.ndarray
    bounds: tuple[int, int, int, int]
    top_anchor: tuple[int, int]
    bottom_anchor: tuple[int, int]


@dataclass
class CostField:
    """Per-pixel seam cost over the overlap; +inf off-mask."""

    e: np.ndarray
    S_m: np.ndarray
    S_d: np.ndarray


@dataclass
class CumulativeField:
    """Accumulated seam costs and the chosen predecessor direction per pixel.

    directions: -1 none, 0 vertical from column j-1, 1 vertical same column,
    2 vertical from j+1, 3 horizontal from j-1, 4 horizontal from j+1.
    The private chain rasters preserve the left/right relaxation provenance
    needed to backtrack horizontal runs without cycles.
    """

    C: np.ndarray
    directions: np.ndarray
    _vdir: np.ndarray
    _lsrc: np.ndarray
    _rsrc: np.ndarray
    _csel: np.ndarray


@dataclass
class Seam:
    """Pixel path from the top anchor to the bottom anchor, canvas coords."""

    path: np.ndarray  # (K, 2) int, (x, y) ordered top to bottom


@dataclass
class PenaltyField:
    D: np.ndarray
    lam: float


# ---------------------------------------------------------------------------
# overlap and cost


def compute_overlap(warped_a: WarpedImage, warped_b: WarpedImage) -> OverlapRegion:
    """Mask intersection with row-centroid anchors at the extreme rows."""
    if warped_a.mask.shape != warped_b.mask.shape:
        raise ValueError("warped images must share a canvas")
    inter = warped_a.mask & warped_b.mask
    if not inter.any():
        raise NoOverlapError("warped masks do not intersect")
    rows = np.nonzero(inter.any(axis=1))[0]
    cols = np.nonzero(inter.any(axis=0))[0]
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    mask = inter[y0:y1 + 1, x0:x1 + 1]

    def row_anchor(row: int) -> tuple[int, int]:
        xs = np.nonzero(inter[row])[0]
        cx = int(round(float(xs.mean())))
        if not inter[row, cx]:
            cx = int(xs[np.argmin(np.abs(xs - cx))])
        return cx, row

    return OverlapRegion(
        mask=mask,
        bounds=(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
        top_anchor=row_anchor(y0),
        bottom_anchor=row_anchor(y1),
    )


def _masked_gradient_norm(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """L2 gradient magnitude with central differences, one-sided where a
    neighbor falls off the mask, zero where no in-mask neighbor exists."""
    m = mask
    left = np.zeros_like(m)
    right = np.zeros_like(m)
    up = np.zeros_like(m)
    down = np.zeros_like(m)
    left[:, 1:] = m[:, :-1]
    right[:, :-1] = m[:, 1:]
    up[1:, :] = m[:-1, :]
    down[:-1, :] = m[1:, :]

    shifted_l = np.zeros_like(img)
    shifted_r = np.zeros_like(img)
    shifted_u = np.zeros_like(img)
    shifted_d = np.zeros_like(img)
    shifted_l[:, 1:] = img[:, :-1]
    shifted_r[:, :-1] = img[:, 1:]
    shifted_u[1:, :] = img[:-1, :]
    shifted_d[:-1, :] = img[1:, :]

    dx = np.where(
        left & right,
        0.5 * (shifted_r - shifted_l),
        np.where(right, shifted_r - img, np.where(left, img - shifted_l, 0.0)),
    )
    dy = np.where(
        up & down,
        0.5 * (shifted_d - shifted_u),
        np.where(down, shifted_d - img, np.where(up, img - shifted_u, 0.0)),
    )

    out = np.hypot(dx, dy)
    out[~m] = 0.0
    return out


def _to_intensity(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    return arr.mean(axis=2) if arr.ndim == 3 else arr


def compute_gradient_cost(
    region: OverlapRegion, I_s: np.ndarray, I_t: np.ndarray
) -> CostField:
    """Gradient smoothness plus gradient difference, each normalized by its
    mask mean; a component whose mean gradient is zero contributes nothing."""
    x0, y0, w, h = region.bounds
    a = _to_intensity(np.asarray(I_s)[y0:y0 + h, x0:x0 + w])
    b = _to_intensity(np.asarray(I_t)[y0:y0 + h, x0:x0 + w])
    mask = region.mask

    def normalized(img):
        g = _masked_gradient_norm(img, mask)
        mean = float(g[mask].mean())
        if mean < 1e-12:
            return np.zeros_like(g)
        return g / mean

    S_m = normalized(a + b)
    S_d = normalized(a - b)
    e = S_m + S_d
    e[~mask] = _INF
    return CostField(e=e, S_m=S_m, S_d=S_d)


# ---------------------------------------------------------------------------
# dynamic programming


@njit(cache=True)
def _dp_forward(e, start_col):
    """Row sweep with bidirectional intra-row relaxation.

    Per row: vertical three-direction step from the previous row, then a
    left-to-right and a right-to-left pass for same-row moves. Tie order:
    straight down, then smaller column. Returns the cumulative cost plus
    the chain rasters needed for backtracking.
    """
    h, w = e.shape
    C = np.full((h, w), _INF)
    vdir = np.zeros((h, w), np.int8)    # vertical predecessor column offset
    lsrc = np.zeros((h, w), np.int8)    # 1: L-chain came from the left neighbor
    rsrc = np.zeros((h, w), np.int8)    # 1: R-chain came from the right neighbor
    csel = np.zeros((h, w), np.int8)    # 0: C uses the L chain, 1: the R chain

    V = np.full(w, _INF)
    L = np.empty(w)
    R = np.empty(w)

    for i in range(h):
        if i == 0:
            for j in range(w):
                V[j] = _INF
            V[start_col] = e[0, start_col]
        else:
            for j in range(w):
                best = C[i - 1, j]
                arg = np.int8(0)
                if j > 0 and C[i - 1, j - 1] < best:
                    best = C[i - 1, j - 1]
                    arg = np.int8(-1)
                if j < w - 1 and C[i - 1, j + 1] < best:
                    best = C[i - 1, j + 1]
                    arg = np.int8(1)
                V[j] = e[i, j] + best
                vdir[i, j] = arg

        for j in range(w):
            L[j] = V[j]
            if j > 0:
                cand = L[j - 1] + e[i, j]
                if cand < L[j]:
                    L[j] = cand
                    lsrc[i, j] = 1
        for j in range(w - 1, -1, -1):
            R[j] = V[j]
            if j < w - 1:
                cand = R[j + 1] + e[i, j]
                if cand < R[j]:
                    R[j] = cand
                    rsrc[i, j] = 1
        for j in range(w):
            if R[j] < L[j]:
                C[i, j] = R[j]
                csel[i, j] = 1
            else:
                C[i, j] = L[j]

    return C, vdir, lsrc, rsrc, csel


@njit(cache=True)
def _dp_backtrack(vdir, lsrc, rsrc, csel, end_col):
    """Walk the provenance chains from the bottom anchor to the top anchor."""
    h, w = vdir.shape
    max_len = h * w + 1
    xs = np.empty(max_len, np.int64)
    ys = np.empty(max_len, np.int64)
    k = 0
    i = h - 1
    j = end_col
    while True:
        xs[k] = j
        ys[k] = i
        k += 1
        if csel[i, j] == 0:
            # consume the leftward-origin horizontal run
            while lsrc[i, j] == 1:
                j -= 1
                xs[k] = j
                ys[k] = i
                k += 1
        else:
            while rsrc[i, j] == 1:
                j += 1
                xs[k] = j
                ys[k] = i
                k += 1
        if i == 0:
            break
        j = j + vdir[i, j]
        i -= 1
    return xs[:k], ys[:k]


def compute_cumulative(cost: CostField, region: OverlapRegion) -> CumulativeField:
    """Run the seam recurrence over the cost field from the top anchor."""
    x0, y0, _, _ = region.bounds
    start = region.top_anchor[0] - x0
    C, vdir, lsrc, rsrc, csel = _dp_forward(cost.e, start)
    directions = np.full(C.shape, -1, np.int8)
    finite = np.isfinite(C)
    horiz = np.where(csel == 0, np.where(lsrc == 1, 3, -1), np.where(rsrc == 1, 4, -1))
    vert = vdir.astype(np.int8) + 1
    directions[finite] = np.where(horiz[finite] >= 0, horiz[finite], vert[finite])
    return CumulativeField(C=C, directions=directions,
                           _vdir=vdir, _lsrc=lsrc, _rsrc=rsrc, _csel=csel)


def _extract_seam(cum: CumulativeField, region: OverlapRegion) -> Seam:
    x0, y0, _, _ = region.bounds
    end = region.bottom_anchor[0] - x0
    if not np.isfinite(cum.C[-1, end]):
        raise NoPathError("anchors are not connected through the overlap mask")
    xs, ys = _dp_backtrack(cum._vdir, cum._lsrc, cum._rsrc, cum._csel, end)
    path = np.stack([xs[::-1] + x0, ys[::-1] + y0], axis=1)
    return Seam(path=path)


def find_seam(cost: CostField, region: OverlapRegion) -> Seam:
    """Minimal-cost anchored seam through the overlap."""
    return _extract_seam(compute_cumulative(cost, region), region)


def find_seam_reanchored(cost: CostField, region: OverlapRegion) -> Seam:
    """find_seam, re-anchored when the strict anchors have no path.

    A piecewise-projective warp can shed small disconnected fragments or
    monotonically unreachable rows at its mask boundary, and a row-centroid
    anchor landing on one makes the strict search unsolvable even though
    the dominant overlap is routable. Retries on the largest 8-connected
    mask component; if the bottom anchor is still unreachable, the path
    ends at the cheapest reachable cell of the deepest reachable row.
    """
    try:
        return find_seam(cost, region)
    except NoPathError as exc:
        original = exc

    labels, count = ndimage.label(region.mask, structure=np.ones((3, 3), bool))
    if count > 1:
        sizes = np.bincount(labels.ravel())
        main = labels == (1 + int(np.argmax(sizes[1:])))
    else:
        main = region.mask
    rows = np.nonzero(main.any(axis=1))[0]
    cols = np.nonzero(main.any(axis=0))[0]
    ry0, ry1, rx0, rx1 = int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])
    sub_mask = main[ry0:ry1 + 1, rx0:rx1 + 1]
    e = cost.e[ry0:ry1 + 1, rx0:rx1 + 1].copy()
    e[~sub_mask] = _INF
    sub_cost = CostField(
        e=e,
        S_m=cost.S_m[ry0:ry1 + 1, rx0:rx1 + 1],
        S_d=cost.S_d[ry0:ry1 + 1, rx0:rx1 + 1],
    )
    x0 = region.bounds[0] + rx0
    y0 = region.bounds[1] + ry0

    def row_anchor(r: int) -> tuple[int, int]:
        xs = np.nonzero(sub_mask[r])[0]
        cx = int(round(float(xs.mean())))
        if not sub_mask[r, cx]:
            cx = int(xs[np.argmin(np.abs(xs - cx))])
        return cx + x0, r + y0

    sub_region = OverlapRegion(
        mask=sub_mask,
        bounds=(x0, y0, rx1 - rx0 + 1, ry1 - ry0 + 1),
        top_anchor=row_anchor(0),
        bottom_anchor=row_anchor(sub_mask.shape[0] - 1),
    )
    cum = compute_cumulative(sub_cost, sub_region)
    finite = np.isfinite(cum.C)
    if finite[-1, sub_region.bottom_anchor[0] - x0]:
        return _extract_seam(cum, sub_region)

    reach = np.nonzero(finite.any(axis=1))[0]
    last = int(reach[-1])
    if last == 0:
        raise original
    # end at the cheapest reachable cell of the deepest reachable row; the
    # recurrence is top-down, so rows below it can simply be sliced off
    row_c = np.where(finite[last], cum.C[last], _INF)
    end_col = int(np.argmin(row_c))
    sliced = CumulativeField(
        C=cum.C[:last + 1], directions=cum.directions[:last + 1],
        _vdir=cum._vdir[:last + 1], _lsrc=cum._lsrc[:last + 1],
        _rsrc=cum._rsrc[:last + 1], _csel=cum._csel[:last + 1],
    )
    shaved = OverlapRegion(
        mask=sub_mask[:last + 1],
        bounds=(x0, y0, rx1 - rx0 + 1, last + 1),
        top_anchor=sub_region.top_anchor,
        bottom_anchor=(end_col + x0, last + y0),
    )
    return _extract_seam(sliced, shaved)


def seam_cost(seam: Seam, cost: CostField, region: OverlapRegion) -> float:
    """Sum of the cost field along the seam path."""
    x0, y0, _, _ = region.bounds
    xs = seam.path[:, 0] - x0
    ys = seam.path[:, 1] - y0
    return float(cost.e[ys, xs].sum())


# ---------------------------------------------------------------------------
# temporal penalty


def build_penalty(prev: Seam, region: OverlapRegion, lam: float) -> PenaltyField:
    """Horizontal-distance penalty toward the previous seam.

    D(i, j) = lam * |j - j_prev(i)| using the nearest previous-seam pixel in
    row i; rows the previous seam does not touch borrow its nearest row.
    """
    x0, y0, w, h = region.bounds
    D = np.zeros((h, w))
    if lam == 0.0:
        return PenaltyField(D=D, lam=0.0)

    seam_rows = prev.path[:, 1]
    order = np.argsort(seam_rows, kind="stable")
    rows_sorted = seam_rows[order]
    cols_sorted = prev.path[:, 0][order]
    unique_rows, starts = np.unique(rows_sorted, return_index=True)

    cols_grid = np.arange(w, dtype=np.float64) + x0
    for i in range(h):
        row = y0 + i
        k = np.searchsorted(unique_rows, row)
        if k == len(unique_rows):
            k -= 1
        elif k > 0 and abs(int(unique_rows[k]) - row) >= abs(row - int(unique_rows[k - 1])):
            k -= 1
        lo = starts[k]
        hi = starts[k + 1] if k + 1 < len(starts) else len(cols_sorted)
        cols = cols_sorted[lo:hi]
        D[i] = lam * np.abs(cols_grid[:, None] - cols[None, :]).min(axis=1)
    D[~region.mask] = 0.0
    return PenaltyField(D=D, lam=lam)


def default_penalty_weight(cost: CostField, region: OverlapRegion) -> float:
    """Penalty weight making one overlap-width of drift cost one mean pixel."""
    mean_e = float(cost.e[region.mask].mean())
    return mean_e / max(region.bounds[2], 1)


def update_seam(
    cost: CostField,
    penalty: PenaltyField,
    region: OverlapRegion,
    mode: str = "per_pixel",
) -> Seam:
    """Seam under cost plus temporal penalty.

    "per_pixel" adds the penalty to the cost before accumulation (the
    operational realization). "cumulative" is the diagnostic literal
    reading: accumulate the raw cost, add the penalty to the cumulative
    matrix, and descend it from the bottom anchor with vertical moves.
    """
    if mode == "per_pixel":
        combined = CostField(e=cost.e + penalty.D, S_m=cost.S_m, S_d=cost.S_d)
        return find_seam(combined, region)
    if mode != "cumulative":
        raise ValueError(f"unknown mode {mode!r}")

    x0, y0, w, h = region.bounds
    cum = compute_cumulative(cost, region)
    Ct = cum.C + penalty.D
    end = region.bottom_anchor[0] - x0
    if not np.isfinite(Ct[-1, end]):
        raise NoPathError("anchors are not connected through the overlap mask")
    xs = [end]
    for i in range(h - 1, 0, -1):
        j = xs[-1]
        best_j = j
        best = Ct[i - 1, j]
        if j > 0 and Ct[i - 1, j - 1] < best:
            best = Ct[i - 1, j - 1]
            best_j = j - 1
        if j < w - 1 and Ct[i - 1, j + 1] < best:
            best = Ct[i - 1, j + 1]
            best_j = j + 1
        xs.append(best_j)
    path = np.stack([
        np.asarray(xs[::-1], dtype=np.int64) + x0,
        np.arange(h, dtype=np.int64) + y0,
    ], axis=1)
    return Seam(path=path)
