"""Feature detection, matching, and conditional-sampling inlier selection.

The detector is a multi-scale Harris corner detector with a
gradient-orientation-histogram descriptor. Inlier selection generates
many minimal-subset homography hypotheses (uniform seeding, then
conditional sampling driven by residual-ranking overlap) and admits
matches by best residual plus preference agreement with the selected set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateEstimationError, InsufficientDataError, NoInliersError
from .geometry import apply_homography, estimate_global_homography

_BLOCK = 10          # hypotheses between preference refreshes while sampling
_BIG_RESIDUAL = 1e18


@dataclass
class Keypoint:
    position: np.ndarray    # (x, y)
    scale: float
    orientation: float
    descriptor: np.ndarray


@dataclass
class MatchSet:
    """Matched point pairs; scores are descriptor distances (lower is better)."""

    src: np.ndarray        # (N, 2)
    dst: np.ndarray        # (N, 2)
    scores: np.ndarray     # (N,)

    def __len__(self) -> int:
        return self.src.shape[0]

    def take(self, idx: np.ndarray) -> "MatchSet":
        return MatchSet(self.src[idx], self.dst[idx], self.scores[idx])


@dataclass(frozen=True)
class SelectionParams:
    """Hypothesis-count and threshold knobs for inlier selection.

    m is the ranking-prefix length for overlap probabilities; when omitted
    it defaults to a 10% prefix (M // 10, at least 1).
    """

    s: int = 4
    eps_o: float = 1.0
    eps_r: float = 0.01
    M0: int = 10
    M: int = 500
    m: int | None = None

    def __post_init__(self):
        if self.s < 4:
            raise ValueError("s must be >= 4")
        if not (self.M >= self.M0 >= 1):
            raise ValueError("need M >= M0 >= 1")
        if self.m is None:
            object.__setattr__(self, "m", max(1, self.M // 10))
        if not (1 <= self.m <= self.M):
            raise ValueError("need 1 <= m <= M")
        if not self.eps_o > 0:
            raise ValueError("eps_o must be > 0")
        if not 0.0 <= self.eps_r <= 1.0:
            raise ValueError("eps_r must be in [0, 1]")


@dataclass
class HypothesisSet:
    hypotheses: np.ndarray   # (M, 3, 3)
    subsets: np.ndarray      # (M, s) match indices, each row distinct as a set

    @property
    def count(self) -> int:
        return self.hypotheses.shape[0]


@dataclass
class ResidualTable:
    residuals: np.ndarray     # (N, M) symmetric transfer error in px
    ranked_lists: np.ndarray  # (N, M) hypothesis indices, residual-ascending


# ---------------------------------------------------------------------------
# detection and description


def _to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _harris_response(img: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(img)
    sxx = ndimage.gaussian_filter(gx * gx, 1.5)
    syy = ndimage.gaussian_filter(gy * gy, 1.5)
    sxy = ndimage.gaussian_filter(gx * gy, 1.5)
    return sxx * syy - sxy**2 - 0.05 * (sxx + syy) ** 2


def _descriptors(img: np.ndarray, pts: np.ndarray, orientations: np.ndarray) -> np.ndarray:
    """4x4 spatial grid of 8-bin gradient orientation histograms over a
    16x16 window, angles taken relative to the keypoint orientation."""
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    offs = np.arange(-8, 8) + 0.5
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    # gaussian emphasis toward the window center
    wspatial = np.exp(-(ox**2 + oy**2) / (2 * 6.0**2)).ravel()
    cell = ((oy.ravel() + 8) // 4).astype(int) * 4 + ((ox.ravel() + 8) // 4).astype(int)

    n = len(pts)
    desc = np.zeros((n, 128))
    xs = np.clip((pts[:, 0, None] + ox.ravel()[None, :]).round().astype(int), 0, img.shape[1] - 1)
    ys = np.clip((pts[:, 1, None] + oy.ravel()[None, :]).round().astype(int), 0, img.shape[0] - 1)
    m = mag[ys, xs] * wspatial[None, :]
    a = ang[ys, xs] - orientations[:, None]
    bins = np.floor((a % (2 * math.pi)) / (2 * math.pi) * 8).astype(int) % 8
    flat_idx = cell[None, :] * 8 + bins
    for i in range(n):
        np.add.at(desc[i], flat_idx[i], m[i])
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    desc /= np.maximum(norms, 1e-12)
    desc = np.minimum(desc, 0.2)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    return desc / np.maximum(norms, 1e-12)


def detect_and_describe(
    image: np.ndarray,
    max_keypoints: int = 1500,
    octaves: int = 3,
    rel_threshold: float = 0.01,
) -> list[Keypoint]:
    """Multi-scale Harris corners with orientation-histogram descriptors.

    Corners are non-maximum-suppressed per octave and kept above
    rel_threshold of the octave's peak response; an exactly uniform image
    yields no keypoints.
    """
    gray = _to_gray(image)
    if not gray.any():
        return []
    keypoints: list[Keypoint] = []
    img = gray
    for k in range(octaves):
        if min(img.shape) < 24:
            break
        resp = _harris_response(img)
        local_max = ndimage.maximum_filter(resp, size=3)
        thresh = max(resp.max() * rel_threshold, 1e-12)
        ys, xs = np.nonzero((resp >= local_max) & (resp > thresh))
        margin = 9
        keep = (
            (xs >= margin) & (xs < img.shape[1] - margin)
            & (ys >= margin) & (ys < img.shape[0] - margin)
        )
        ys, xs = ys[keep], xs[keep]
        if len(xs) == 0:
            img = ndimage.gaussian_filter(img, 1.0)[::2, ::2]
            continue
        order = np.argsort(resp[ys, xs])[::-1][:max_keypoints]
        ys, xs = ys[order], xs[order]
        gy, gx = np.gradient(ndimage.gaussian_filter(img, 2.0))
        orients = np.arctan2(gy[ys, xs], gx[ys, xs])
        pts = np.stack([xs, ys], axis=1).astype(np.float64)
        descs = _descriptors(img, pts, orients)
        scale = float(2**k)
        for p, o, d in zip(pts, orients, descs):
            keypoints.append(
                Keypoint(position=p * scale, scale=scale, orientation=float(o), descriptor=d)
            )
        img = ndimage.gaussian_filter(img, 1.0)[::2, ::2]
    return keypoints


def match_descriptors(
    a: list[Keypoint], b: list[Keypoint], ratio: float = 0.8
) -> MatchSet:
    """Mutual nearest-neighbor descriptor matches passing Lowe's ratio test."""
    if not a or not b:
        return MatchSet(np.empty((0, 2)), np.empty((0, 2)), np.empty(0))
    da = np.stack([kp.descriptor for kp in a])
    db = np.stack([kp.descriptor for kp in b])
    d2 = np.maximum(
        np.sum(da**2, axis=1)[:, None] + np.sum(db**2, axis=1)[None, :] - 2.0 * (da @ db.T),
        0.0,
    )
    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    best = d2[np.arange(len(a)), nn_ab]
    if d2.shape[1] > 1:
        part = np.partition(d2, 1, axis=1)
        second = part[:, 1]
    else:
        second = np.full(len(a), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        ok_ratio = np.sqrt(best) < ratio * np.sqrt(np.maximum(second, 1e-300))
    ok_ratio |= best == 0.0
    mutual = nn_ba[nn_ab] == np.arange(len(a))
    sel = np.nonzero(ok_ratio & mutual)[0]
    src = np.stack([a[i].position for i in sel]) if len(sel) else np.empty((0, 2))
    dst = np.stack([b[nn_ab[i]].position for i in sel]) if len(sel) else np.empty((0, 2))
    return MatchSet(src=src, dst=dst, scores=np.sqrt(best[sel]))


# ---------------------------------------------------------------------------
# hypothesis generation


def _fit_minimal(src: np.ndarray, dst: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return estimate_global_homography(src[idx], dst[idx])


def _prefix_membership(residuals: np.ndarray, m: int, tie: float = 1e-9) -> np.ndarray:
    """(N, M) bool: hypothesis is within the match's top-m residuals.

    Hypotheses tied with the m-th smallest residual (within `tie`) are all
    members: on noise-free data the ordering among numerically identical
    residuals is meaningless and must not fragment preferences.
    """
    kth = np.partition(residuals, m - 1, axis=1)[:, m - 1]
    return residuals <= (kth + tie)[:, None]


def _residual_column(src: np.ndarray, dst: np.ndarray, H: np.ndarray) -> np.ndarray:
    fwd = np.linalg.norm(apply_homography(H, src) - dst, axis=1)
    bwd = np.linalg.norm(apply_homography(np.linalg.inv(H), dst) - src, axis=1)
    r = 0.5 * (fwd + bwd)
    return np.where(np.isfinite(r), r, _BIG_RESIDUAL)


def generate_hypotheses(
    matches: MatchSet, params: SelectionParams, seed: int
) -> HypothesisSet:
    """Sample M homography hypotheses from distinct minimal subsets.

    The first M0 subsets are uniform; afterwards each subset is grown by
    conditional sampling: the first member uniform, later members drawn
    with probability proportional to the product of top-m ranking overlaps
    with the members already chosen. Preferences refresh in blocks as
    hypotheses accumulate. Stops early (fewer than M) only when distinct
    non-degenerate subsets run out.
    """
    n = len(matches)
    s = params.s
    if n < s:
        raise InsufficientDataError(f"need >= {s} matches, got {n}")
    rng = np.random.default_rng(seed)
    src, dst = matches.src, matches.dst

    seen: set[tuple[int, ...]] = set()
    hyps: list[np.ndarray] = []
    subsets: list[np.ndarray] = []
    residuals = np.empty((n, params.M))
    member: np.ndarray | None = None
    max_attempts = 200

    def try_subset(idx: np.ndarray) -> bool:
        key = tuple(sorted(int(i) for i in idx))
        if key in seen:
            return False
        seen.add(key)
        try:
            H = _fit_minimal(src, dst, idx)
        except DegenerateEstimationError:
            return False
        hyps.append(H)
        subsets.append(np.asarray(key, dtype=np.int64))
        col = _residual_column(src, dst, H)
        # leave-one-out: a subset member's zero self-fit residual says
        # nothing about the hypothesis, so it must not shape preferences
        col[list(key)] = _BIG_RESIDUAL
        residuals[:, len(hyps) - 1] = col
        return True

    def draw_conditional() -> np.ndarray:
        chosen = [int(rng.integers(n))]
        weights = np.ones(n)
        for _ in range(s - 1):
            assert member is not None
            overlap = member[chosen[-1]] & member
            f = overlap.sum(axis=1).astype(np.float64)
            weights = weights * f
            weights[chosen] = 0.0
            total = weights.sum()
            if total <= 0.0:
                avail = np.ones(n)
                avail[chosen] = 0.0
                probs = avail / avail.sum()
            else:
                probs = weights / total
            chosen.append(int(rng.choice(n, p=probs)))
        return np.asarray(chosen)

    # uniform seeding phase
    attempts = 0
    while len(hyps) < min(params.M0, params.M) and attempts < max_attempts * params.M0:
        attempts += 1
        try_subset(rng.choice(n, size=s, replace=False))

    # conditional phase
    attempts = 0
    while len(hyps) < params.M and attempts < max_attempts * params.M:
        attempts += 1
        if member is None or len(hyps) % _BLOCK == 0:
            m_cur = max(1, min(params.m, math.ceil(0.1 * len(hyps))))
            member = _prefix_membership(residuals[:, :len(hyps)], m_cur)
        if not try_subset(draw_conditional()):
            # fall back to a uniform draw so a sticky weight pattern
            # cannot stall the sampler
            try_subset(rng.choice(n, size=s, replace=False))

    if not hyps:
        raise DegenerateEstimationError("no non-degenerate minimal subset found")
    return HypothesisSet(hypotheses=np.stack(hyps), subsets=np.stack(subsets))


def rank_hypotheses(matches: MatchSet, hyps: HypothesisSet) -> ResidualTable:
    """Symmetric transfer error of every match under every hypothesis,
    with per-match hypothesis orderings (ascending residual, ties by index)."""
    n = len(matches)
    res = np.empty((n, hyps.count))
    for k in range(hyps.count):
        res[:, k] = _residual_column(matches.src, matches.dst, hyps.hypotheses[k])
    ranked = np.argsort(res, axis=1, kind="stable").astype(np.int32)
    return ResidualTable(residuals=res, ranked_lists=ranked)


def conditional_inlier_probability(
    list_i: np.ndarray, list_j: np.ndarray, m: int
) -> float:
    """Fraction of shared hypotheses among the two top-m prefixes."""
    if not 1 <= m <= min(len(list_i), len(list_j)):
        raise ValueError(f"m={m} out of range for list lengths "
                         f"{len(list_i)}, {len(list_j)}")
    shared = np.intersect1d(list_i[:m], list_j[:m], assume_unique=True)
    return float(len(shared)) / float(m)


def select_inliers(
    matches: MatchSet,
    table: ResidualTable,
    hyps: HypothesisSet,
    params: SelectionParams,
    mode: str = "components",
) -> MatchSet:
    """Greedy inlier selection by residual and preference agreement.

    Candidates are matches whose best-hypothesis residual is <= eps_o
    (hypotheses fitted through the match itself excluded), visited in
    ascending best-residual order. The default "components" mode runs
    min-aggregated selection repeatedly: the best unassigned candidate
    seeds a run, a candidate joins when its top-m ranking overlap with
    every member of the run reaches eps_r, and runs smaller than the
    minimal subset size are dropped. The union of surviving runs is
    returned, so every scene structure with minimal support contributes
    inliers; a single run cannot do this because matches on distinct
    structures rank disjoint hypothesis prefixes. Requiring agreement
    with all members keeps residual-gate survivors from bridging into a
    structure through one stray hypothesis. The single-set modes gate
    admission on aggregate overlap against one growing set: "min"
    requires agreement with every member, "mean" with the membership
    average, "first" with the seed only.
    """
    if mode not in ("components", "min", "mean", "first"):
        raise ValueError(f"unknown mode {mode!r}")
    n = len(matches)
    if n == 0 or table.residuals.size == 0:
        raise NoInliersError("empty match set")
    m = min(params.m, hyps.count)
    # leave-one-out residual view: a hypothesis fitted through the match
    # itself would report a meaningless near-zero residual
    masked = table.residuals.copy()
    s = hyps.subsets.shape[1]
    masked[hyps.subsets.ravel(), np.repeat(np.arange(hyps.count), s)] = _BIG_RESIDUAL
    all_masked = (masked >= _BIG_RESIDUAL).all(axis=1)
    if all_masked.any():
        masked[all_masked] = table.residuals[all_masked]
    best = masked.min(axis=1)
    cand = np.nonzero(best <= params.eps_o)[0]
    if len(cand) == 0:
        raise NoInliersError("no match within the residual threshold")
    # deterministic order independent of input permutation: residual first,
    # then coordinates as intrinsic tie-breakers
    order = np.lexsort((
        matches.dst[cand, 1], matches.dst[cand, 0],
        matches.src[cand, 1], matches.src[cand, 0],
        best[cand],
    ))
    cand = cand[order]

    member = _prefix_membership(masked, m)
    if mode == "components":
        cand_member = member[cand].astype(np.int32)
        assigned = np.zeros(len(cand), dtype=bool)
        kept: list[np.ndarray] = []
        for i0 in range(len(cand)):
            if assigned[i0]:
                continue
            run = [i0]
            assigned[i0] = True
            # min over members of the shared top-m count, updated on admit
            mincount = cand_member @ cand_member[i0]
            for j in range(i0 + 1, len(cand)):
                if assigned[j]:
                    continue
                if mincount[j] / m >= params.eps_r:
                    run.append(j)
                    assigned[j] = True
                    np.minimum(mincount, cand_member @ cand_member[j], out=mincount)
            if len(run) >= s:
                kept.append(cand[np.asarray(run, dtype=np.int64)])
        if not kept:
            raise NoInliersError("no preference run with minimal support")
        return matches.take(np.unique(np.concatenate(kept)).astype(np.int64))

    selected = [int(cand[0])]
    for idx in cand[1:]:
        overlaps = member[selected] & member[idx]
        f = np.minimum(overlaps.sum(axis=1).astype(np.float64) / m, 1.0)
        if mode == "min":
            p = float(f.min())
        elif mode == "mean":
            p = float(f.mean())
        else:
            p = float(f[0])
        if p >= params.eps_r:
            selected.append(int(idx))
    return matches.take(np.asarray(sorted(selected), dtype=np.int64))
