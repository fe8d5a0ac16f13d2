"""Synthetic scene generator with known warps and correspondences.

Scenes are stacks of textured horizontal bands, each band tied to its own
plane homography. Frame A is the perspective view; frame B applies the
equidistant fisheye mapping (r = f * theta) on top of the per-plane warps.
Because every mapping is constructed, correspondences come with exact
inlier/outlier labels and per-plane homographies for use as test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import apply_homography

TEXTURE_MARGIN = 64


@dataclass
class SceneSpec:
    """Recipe for a frame pair: textured planes, lens, and match corruption.

    Each plane is (texture, H) where H maps frame-A pixels to undistorted
    frame-B pixels and the texture raster covers the frame plus a margin on
    every side so the fisheye view stays fully textured.
    """

    planes: list
    fisheye_focal: float = 400.0
    outlier_fraction: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    frame_size: tuple = (320, 240)
    match_count: int = 200

    def __post_init__(self) -> None:
        if len(self.planes) < 1:
            raise ValueError("need at least one plane")
        if self.fisheye_focal <= 0:
            raise ValueError("fisheye_focal must be > 0")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.frame_size[0] < 16 or self.frame_size[1] < 16:
            raise ValueError("frame_size too small")


@dataclass
class GroundTruth:
    """Labeled correspondences and the plane homographies that explain them."""

    src: np.ndarray          # (N, 2) frame-A points
    dst: np.ndarray          # (N, 2) frame-B points
    inlier: np.ndarray       # (N,) bool
    plane_id: np.ndarray     # (N,) int, -1 for outliers
    homographies: list


@dataclass
class SquareSpec:
    """Textured square object translating across the scene."""

    size: int
    start: tuple
    velocity: tuple


@dataclass
class SequenceResult:
    frames_a: list
    frames_b: list
    truths: list
    object_masks: list | None = None


# ---------------------------------------------------------------------------
# fisheye model


def fisheye_forward(points: np.ndarray, center: tuple, focal: float) -> np.ndarray:
    """Map undistorted pixels to fisheye pixels: r_out = f * atan(r_in / f)."""
    pts = np.asarray(points, dtype=np.float64)
    d = pts - np.asarray(center, dtype=np.float64)
    r0 = np.hypot(d[..., 0], d[..., 1])
    theta = np.arctan2(r0, focal)
    r = focal * theta
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(r0 > 0, r / np.where(r0 > 0, r0, 1.0), 1.0)
    return np.asarray(center) + d * scale[..., None]


def fisheye_inverse(points: np.ndarray, center: tuple, focal: float):
    """Map fisheye pixels back to undistorted pixels; valid while the ray
    angle r / f stays below a quarter turn."""
    pts = np.asarray(points, dtype=np.float64)
    d = pts - np.asarray(center, dtype=np.float64)
    r = np.hypot(d[..., 0], d[..., 1])
    theta = r / focal
    valid = theta < (np.pi / 2 - 1e-6)
    safe = np.where(valid, theta, 0.0)
    r0 = focal * np.tan(safe)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(r > 0, r0 / np.where(r > 0, r, 1.0), 1.0)
    return np.asarray(center) + d * scale[..., None], valid


def frame_center(frame_size: tuple) -> tuple:
    w, h = frame_size
    return ((w - 1) / 2.0, (h - 1) / 2.0)


# ---------------------------------------------------------------------------
# rendering


def _bilinear(tex: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample a texture at float coords; out-of-range reads clamp to edge."""
    h, w = tex.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    p00 = tex[y0, x0]
    p01 = tex[y0, x0 + 1]
    p10 = tex[y0 + 1, x0]
    p11 = tex[y0 + 1, x0 + 1]
    top = p00 * (1 - fx) + p01 * fx
    bot = p10 * (1 - fx) + p11 * fx
    return top * (1 - fy) + bot * fy


def _band_bounds(plane_idx: int, n_planes: int, frame_h: int) -> tuple:
    lo = plane_idx * frame_h / n_planes
    hi = (plane_idx + 1) * frame_h / n_planes
    return lo, hi


def _band_of(y: np.ndarray, n_planes: int, frame_h: int) -> np.ndarray:
    k = np.floor(np.asarray(y) * n_planes / frame_h).astype(np.int64)
    return np.clip(k, 0, n_planes - 1)


def _render_a(spec: SceneSpec, shift: tuple) -> np.ndarray:
    w, h = spec.frame_size
    n = len(spec.planes)
    margin = (spec.planes[0][0].shape[1] - w) // 2
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tx = xs - shift[0] + margin
    ty = ys - shift[1] + margin
    band = _band_of(ys, n, h)
    out = np.zeros((h, w, 3), dtype=np.float32)
    for k, (tex, _) in enumerate(spec.planes):
        sel = band == k
        out[sel] = _bilinear(tex, tx[sel], ty[sel]).astype(np.float32)
    return out


def _render_b(spec: SceneSpec, shift: tuple) -> np.ndarray:
    w, h = spec.frame_size
    n = len(spec.planes)
    margin = (spec.planes[0][0].shape[1] - w) // 2
    center = frame_center(spec.frame_size)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    undist, valid = fisheye_inverse(pts, center, spec.fisheye_focal)

    out = np.zeros((h * w, 3), dtype=np.float32)
    owned = ~valid  # invalid rays render black and are never reassigned
    for k, (tex, H) in enumerate(spec.planes):
        src = apply_homography(np.linalg.inv(H), undist)
        # content coordinates decide band ownership, so bands ride the shift
        cy = src[:, 1] - shift[1]
        lo, hi = _band_bounds(k, n, h)
        sel = ~owned & valid
        if k > 0:
            sel &= cy >= lo
        if k < n - 1:
            sel &= cy < hi
        tx = src[:, 0] - shift[0] + margin
        ty = cy + margin
        texh, texw = tex.shape[:2]
        sel &= (tx >= 0) & (tx <= texw - 1) & (ty >= 0) & (ty <= texh - 1)
        out[sel] = _bilinear(tex, tx[sel], ty[sel]).astype(np.float32)
        owned |= sel
    return out.reshape(h, w, 3)


def _sample_truth(spec: SceneSpec, rng: np.random.Generator) -> GroundTruth:
    w, h = spec.frame_size
    n = len(spec.planes)
    center = frame_center(spec.frame_size)
    focal = spec.fisheye_focal
    n_out = int(round(spec.outlier_fraction * spec.match_count))
    n_in = spec.match_count - n_out

    src_list, dst_list, plane_list = [], [], []
    quotas = [n_in // n + (1 if k < n_in % n else 0) for k in range(n)]
    for k, (_, H) in enumerate(spec.planes):
        lo, hi = _band_bounds(k, n, h)
        lo, hi = max(lo, 0.0) + 3.0, min(hi, float(h)) - 3.0
        got = 0
        for _ in range(60):
            if got >= quotas[k]:
                break
            m = max(16, 4 * (quotas[k] - got))
            p = np.stack(
                [rng.uniform(5, w - 5, m), rng.uniform(lo, hi, m)], axis=1
            )
            q = fisheye_forward(apply_homography(H, p), center, focal)
            ok = (
                (q[:, 0] >= 2) & (q[:, 0] <= w - 3)
                & (q[:, 1] >= 2) & (q[:, 1] <= h - 3)
            )
            take = min(int(ok.sum()), quotas[k] - got)
            src_list.append(p[ok][:take])
            dst_list.append(q[ok][:take])
            plane_list.append(np.full(take, k, dtype=np.int64))
            got += take
        if got < quotas[k]:
            raise ValueError(f"plane {k} never lands in the fisheye frame")

    src = np.concatenate(src_list) if src_list else np.empty((0, 2))
    dst = np.concatenate(dst_list) if dst_list else np.empty((0, 2))
    plane_id = np.concatenate(plane_list) if plane_list else np.empty(0, np.int64)
    if spec.noise_sigma > 0:
        dst = dst + rng.normal(0.0, spec.noise_sigma / np.sqrt(2), dst.shape)
    inlier = np.ones(len(src), dtype=bool)

    if n_out > 0:
        reject_r = max(10.0, 5.0 * spec.noise_sigma)
        osrc = np.empty((0, 2))
        odst = np.empty((0, 2))
        for _ in range(60):
            if len(osrc) >= n_out:
                break
            m = max(16, 4 * (n_out - len(osrc)))
            p = np.stack(
                [rng.uniform(5, w - 5, m), rng.uniform(5, h - 5, m)], axis=1
            )
            q = np.stack(
                [rng.uniform(2, w - 2, m), rng.uniform(2, h - 2, m)], axis=1
            )
            band = _band_of(p[:, 1], n, h)
            true = np.empty_like(q)
            for k in range(n):
                sel = band == k
                true[sel] = fisheye_forward(
                    apply_homography(spec.planes[k][1], p[sel]), center, focal
                )
            far = np.hypot(*(q - true).T) > reject_r
            osrc = np.concatenate([osrc, p[far]])
            odst = np.concatenate([odst, q[far]])
        osrc, odst = osrc[:n_out], odst[:n_out]
        src = np.concatenate([src, osrc])
        dst = np.concatenate([dst, odst])
        inlier = np.concatenate([inlier, np.zeros(len(osrc), dtype=bool)])
        plane_id = np.concatenate([plane_id, np.full(len(osrc), -1, np.int64)])

    perm = rng.permutation(len(src))
    return GroundTruth(
        src=src[perm],
        dst=dst[perm],
        inlier=inlier[perm],
        plane_id=plane_id[perm],
        homographies=[H for _, H in spec.planes],
    )


def render_pair(spec: SceneSpec):
    """Render the frame pair and its labeled correspondences."""
    rng = np.random.default_rng(spec.seed)
    frame_a = _render_a(spec, (0.0, 0.0))
    frame_b = _render_b(spec, (0.0, 0.0))
    return frame_a, frame_b, _sample_truth(spec, rng)


def make_sequence(
    spec: SceneSpec,
    motion: tuple,
    frames: int,
    square: SquareSpec | None = None,
) -> SequenceResult:
    """Render a sequence with scene content translating by `motion` per frame
    while the rig mapping stays fixed. An optional textured square object
    translates independently; its frame-A footprint masks are returned."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    w, h = spec.frame_size

    sq_tex = None
    if square is not None:
        sq_rng = np.random.default_rng([spec.seed, 777])
        sq_tex = sq_rng.uniform(60, 250, (square.size, square.size, 3))
        sq_tex = ndimage.gaussian_filter(sq_tex, (1.5, 1.5, 0)).astype(np.float32)

    margin = (spec.planes[0][0].shape[1] - w) // 2
    frames_a, frames_b, truths, masks = [], [], [], []
    for k in range(frames):
        shift = (motion[0] * k, motion[1] * k)
        frame_spec = spec
        if square is not None:
            sx = square.start[0] + square.velocity[0] * k
            sy = square.start[1] + square.velocity[1] * k
            planes = [
                (
                    _paint_square(
                        tex, sq_tex,
                        sx - shift[0] + margin, sy - shift[1] + margin,
                    ),
                    H,
                )
                for tex, H in spec.planes
            ]
            frame_spec = SceneSpec(
                planes=planes,
                fisheye_focal=spec.fisheye_focal,
                outlier_fraction=spec.outlier_fraction,
                noise_sigma=spec.noise_sigma,
                seed=spec.seed,
                frame_size=spec.frame_size,
                match_count=spec.match_count,
            )
            xs, ys = np.meshgrid(np.arange(w), np.arange(h))
            masks.append(
                (xs >= sx) & (xs < sx + square.size)
                & (ys >= sy) & (ys < sy + square.size)
            )
        frames_a.append(_render_a(frame_spec, shift))
        frames_b.append(_render_b(frame_spec, shift))
        truths.append(_sample_truth(frame_spec, np.random.default_rng([spec.seed, k])))

    return SequenceResult(
        frames_a=frames_a,
        frames_b=frames_b,
        truths=truths,
        object_masks=masks if square is not None else None,
    )


def _paint_square(tex, sq_tex, ix, iy):
    """Stamp the square texture at texture-raster coords (ix, iy), clipped."""
    out = tex.copy()
    size = sq_tex.shape[0]
    texh, texw = tex.shape[:2]
    x0 = int(np.floor(ix))
    y0 = int(np.floor(iy))
    for dy in range(size):
        yy = y0 + dy
        if 0 <= yy < texh:
            xl = max(x0, 0)
            xr = min(x0 + size, texw)
            if xl < xr:
                out[yy, xl:xr] = sq_tex[dy, xl - x0:xr - x0]
    return out


def make_default_scene(
    seed: int = 0,
    frame_size: tuple = (320, 240),
    planes: int = 2,
    fisheye_focal: float = 400.0,
    outlier_fraction: float = 0.0,
    noise_sigma: float = 0.0,
    match_count: int = 200,
) -> SceneSpec:
    """Two-view scene with smoothly textured bands and distinct per-plane
    warps: a shared baseline translation plus per-plane shear/offset, mild
    enough that the fisheye view keeps a wide overlap."""
    w, h = frame_size
    rng = np.random.default_rng(seed)
    m = TEXTURE_MARGIN
    texw, texh = w + 2 * m, h + 2 * m

    def texture():
        coarse = rng.uniform(0, 255, (texh // 16 + 2, texw // 16 + 2, 3))
        coarse = np.kron(coarse, np.ones((16, 16, 1)))[:texh, :texw]
        coarse = ndimage.gaussian_filter(coarse, (6, 6, 0))
        medium = rng.uniform(0, 255, (texh // 4 + 2, texw // 4 + 2, 3))
        medium = np.kron(medium, np.ones((4, 4, 1)))[:texh, :texw]
        medium = ndimage.gaussian_filter(medium, (2, 2, 0))
        fine = ndimage.gaussian_filter(rng.uniform(0, 255, (texh, texw, 3)), (1, 1, 0))
        t = 0.45 * coarse + 0.35 * medium + 0.20 * fine
        return np.clip(t, 0, 255).astype(np.float32)

    plane_list = []
    for k in range(planes):
        dx = -0.12 * w - k * 0.05 * w
        dy = 4.0 * k
        shear = 0.015 * k
        H = np.array(
            [[1.0, shear, dx],
             [0.0, 1.0, dy],
             [0.0, 0.0, 1.0]]
        )
        plane_list.append((texture(), H))

    return SceneSpec(
        planes=plane_list,
        fisheye_focal=fisheye_focal,
        outlier_fraction=outlier_fraction,
        noise_sigma=noise_sigma,
        seed=seed,
        frame_size=frame_size,
        match_count=match_count,
    )


# ---------------------------------------------------------------------------
# truth files


def write_truth(path, truth: GroundTruth) -> None:
    """One correspondence per line: x1 y1 x2 y2 label plane_id."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("# x1 y1 x2 y2 label plane_id\n")
        for s, d, lab, pid in zip(
            truth.src, truth.dst, truth.inlier, truth.plane_id
        ):
            name = "inlier" if lab else "outlier"
            fh.write(
                f"{s[0]:.6f} {s[1]:.6f} {d[0]:.6f} {d[1]:.6f} {name} {int(pid)}\n"
            )


def read_truth(path) -> GroundTruth:
    src, dst, inl, pid = [], [], [], []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"malformed truth line: {line!r}")
            src.append([float(parts[0]), float(parts[1])])
            dst.append([float(parts[2]), float(parts[3])])
            inl.append(parts[4] == "inlier")
            pid.append(int(parts[5]))
    return GroundTruth(
        src=np.asarray(src, dtype=np.float64).reshape(-1, 2),
        dst=np.asarray(dst, dtype=np.float64).reshape(-1, 2),
        inlier=np.asarray(inl, dtype=bool),
        plane_id=np.asarray(pid, dtype=np.int64),
        homographies=[],
    )
