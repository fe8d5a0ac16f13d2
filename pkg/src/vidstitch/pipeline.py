"""End-to-end stitching orchestration.

Alignment (detect, match, select inliers, warp field, compensation) runs
once or on a configured interval and is cached; the per-frame path warps
both frames with precomputed sampling grids, updates the seam against the
previous frame's seam, and multi-band blends. Timing is accounted per
stage so throughput is observable.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .blend import blend_warped
from .errors import (
    AlignmentError,
    CanvasOverflowError,
    DegenerateEstimationError,
    InsufficientDataError,
    NoInliersError,
)
from .geometry import (
    CanvasExtent,
    SamplingGrid,
    WarpField,
    WeightProfile,
    apply_homography,
    build_sampling_grid,
    build_warp_field,
    compute_canvas,
    estimate_global_homography,
    warp_image,
)
from .matching import (
    SelectionParams,
    detect_and_describe,
    generate_hypotheses,
    match_descriptors,
    rank_hypotheses,
    select_inliers,
)
from .seam import (
    CostField,
    OverlapRegion,
    Seam,
    build_penalty,
    compute_gradient_cost,
    compute_overlap,
    default_penalty_weight,
    find_seam_reanchored,
)


@dataclass
class StitchConfig:
    """All pipeline knobs with working defaults.

    weight_profile None derives sigma as 8% of the frame diagonal with
    gamma 0.01; lam None uses the per-frame default penalty weight;
    pyramid_levels None derives the depth from the canvas dimensions.
    realign_interval 0 aligns once and caches the model for the whole run.
    """

    selection: SelectionParams = field(default_factory=SelectionParams)
    weight_profile: WeightProfile | None = None
    cell_size: int = 16
    lam: float | None = None
    pyramid_levels: int | None = None
    realign_interval: int = 0
    input_size: tuple = (640, 480)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.realign_interval < 0:
            raise ValueError("realign_interval must be >= 0")
        if self.input_size[0] < 16 or self.input_size[1] < 16:
            raise ValueError("input_size too small")
        if self.cell_size < 1:
            raise ValueError("cell_size must be >= 1")

    def resolved_profile(self) -> WeightProfile:
        if self.weight_profile is not None:
            return self.weight_profile
        diag = math.hypot(self.input_size[0], self.input_size[1])
        return WeightProfile(sigma=0.08 * diag, gamma=0.01)


@dataclass
class AlignmentDiagnostics:
    match_count: int
    inlier_count: int
    mean_residual: float
    max_residual: float
    fallback_cells: int


@dataclass
class AlignmentModel:
    """Frozen alignment result with lazily built per-frame warp caches.

    warp_b is the compensation homography for the second image; the canvas
    offset is composed at warp time. The sampling grids and overlap region
    depend only on the model, so they are computed once and reused."""

    warp_field_a: WarpField
    warp_b: np.ndarray
    canvas: CanvasExtent
    inlier_diag: AlignmentDiagnostics
    frame_estimated: int
    global_h: np.ndarray | None = None
    inlier_src: np.ndarray | None = field(default=None, repr=False)
    inlier_dst: np.ndarray | None = field(default=None, repr=False)
    _grid_a: SamplingGrid | None = field(default=None, repr=False)
    _grid_b: SamplingGrid | None = field(default=None, repr=False)
    _region: OverlapRegion | None = field(default=None, repr=False)
    _levels: int | None = field(default=None, repr=False)
    # False marks "not computed yet"; fill_indices itself may return None
    _fill_a: object = field(default=False, repr=False)
    _fill_b: object = field(default=False, repr=False)

    def sampling_grids(self, extent_a, extent_b):
        if self._grid_a is None:
            self._grid_a = build_sampling_grid(self.warp_field_a, extent_a, self.canvas)
            self._grid_b = build_sampling_grid(self.warp_b, extent_b, self.canvas)
        return self._grid_a, self._grid_b

    def pyramid_levels(self, config: StitchConfig) -> int:
        if config.pyramid_levels is not None:
            return config.pyramid_levels
        if self._levels is None:
            depth = int(math.floor(math.log2(min(self.canvas.width,
                                                 self.canvas.height)))) - 2
            self._levels = max(2, min(6, depth))
        return self._levels


@dataclass
class FrameState:
    """Carry-over between consecutive frames of one run."""

    prev_seam: Seam | None = None
    frame_index: int = -1
    timing: dict = field(default_factory=dict)


@dataclass
class RunStats:
    frames: int
    alignments: int
    alignment_failures: int
    truncated_frames: int
    fps: float
    stage_stats: dict
    warnings: list

    def to_text(self, include_timing: bool = True) -> str:
        """Flat key-value report.

        Timing fields are wall-clock measurements; callers writing report
        files keyed to deterministic inputs exclude them so identical runs
        emit identical bytes.
        """
        lines = [
            f"frames {self.frames}",
            f"alignments {self.alignments}",
            f"alignment_failures {self.alignment_failures}",
            f"truncated_frames {self.truncated_frames}",
        ]
        if include_timing:
            lines.append(f"fps {self.fps:.4f}")
            for stage in sorted(self.stage_stats):
                st = self.stage_stats[stage]
                lines.append(f"{stage}_mean_s {st['mean']:.6f}")
                lines.append(f"{stage}_p95_s {st['p95']:.6f}")
        lines.append(f"warning_count {len(self.warnings)}")
        for i, w in enumerate(self.warnings):
            lines.append(f"warning_{i} {w}")
        return "\n".join(lines) + "\n"


def _check_frame(frame: np.ndarray, config: StitchConfig, name: str) -> None:
    h, w = frame.shape[:2]
    if (w, h) != tuple(config.input_size):
        raise ValueError(
            f"{name} is {w}x{h}, configured input_size is "
            f"{config.input_size[0]}x{config.input_size[1]}"
        )


def align(
    frame_a: np.ndarray,
    frame_b: np.ndarray,
    config: StitchConfig,
    frame_index: int = 0,
    matches=None,
) -> AlignmentModel:
    """Estimate the full alignment model for a frame pair.

    Runs detection, matching, hypothesis generation, inlier selection, the
    global fit, the per-cell integrated warp field, and the compensation
    homography for the second image, then sizes the shared canvas. A
    precomputed MatchSet bypasses the internal detector and matcher.
    Estimation failures surface as AlignmentError so callers can fall back
    to a previously cached model.
    """
    _check_frame(frame_a, config, "frame_a")
    _check_frame(frame_b, config, "frame_b")
    extent_a = (frame_a.shape[1], frame_a.shape[0])
    extent_b = (frame_b.shape[1], frame_b.shape[0])

    if matches is None:
        kps_a = detect_and_describe(frame_a)
        kps_b = detect_and_describe(frame_b)
        matches = match_descriptors(kps_a, kps_b)
    try:
        hyps = generate_hypotheses(matches, config.selection, config.seed)
        table = rank_hypotheses(matches, hyps)
        inliers = select_inliers(matches, table, hyps, config.selection)
        H_g = estimate_global_homography(inliers.src, inliers.dst)
        profile = config.resolved_profile()
        warp_field = build_warp_field(
            extent_a, inliers.src, inliers.dst, H_g, profile,
            cell_size=config.cell_size,
        )
        # compensation for the second image: the homography that best moves
        # its coordinates onto the integrated warp of the first image over
        # the inlier set. With a spatially uniform field this is exactly
        # field @ inv(H_local); fitting over all inliers keeps the overlap
        # registered when the ramp varies across a wide overlap.
        mapped = np.stack([
            apply_homography(
                warp_field.homography_at(p[0], p[1]), p[None, :]
            )[0]
            for p in inliers.src
        ])
        R = estimate_global_homography(inliers.dst, mapped)
        canvas = compute_canvas(extent_a, warp_field, extent_b, R)
    except (
        NoInliersError,
        InsufficientDataError,
        DegenerateEstimationError,
        CanvasOverflowError,
    ) as exc:
        raise AlignmentError(f"alignment failed: {exc}") from exc

    res = np.hypot(*(apply_homography(H_g, inliers.src) - inliers.dst).T)
    diag = AlignmentDiagnostics(
        match_count=len(matches),
        inlier_count=len(inliers),
        mean_residual=float(res.mean()),
        max_residual=float(res.max()),
        fallback_cells=warp_field.fallback_cells,
    )
    return AlignmentModel(
        warp_field_a=warp_field,
        warp_b=R,
        canvas=canvas,
        inlier_diag=diag,
        frame_estimated=frame_index,
        global_h=H_g,
        inlier_src=inliers.src.copy(),
        inlier_dst=inliers.dst.copy(),
    )


def stitch_frame(
    frame_a: np.ndarray,
    frame_b: np.ndarray,
    model: AlignmentModel,
    state: FrameState,
    config: StitchConfig,
):
    """Stitch one frame pair under a cached model.

    Warps both frames, computes the overlap seam (penalized toward the
    previous seam when one exists), and multi-band blends. Returns the
    stitched canvas raster and the updated state."""
    _check_frame(frame_a, config, "frame_a")
    _check_frame(frame_b, config, "frame_b")
    extent_a = (frame_a.shape[1], frame_a.shape[0])
    extent_b = (frame_b.shape[1], frame_b.shape[0])

    t0 = time.perf_counter()
    grid_a, grid_b = model.sampling_grids(extent_a, extent_b)
    warped_a = warp_image(frame_a, model.warp_field_a, model.canvas, grid=grid_a)
    warped_b = warp_image(frame_b, model.warp_b, model.canvas, grid=grid_b)

    t1 = time.perf_counter()
    if model._region is None:
        model._region = compute_overlap(warped_a, warped_b)
    region = model._region
    cost = compute_gradient_cost(region, warped_a.pixels, warped_b.pixels)
    if state.prev_seam is None:
        effective = cost
    else:
        lam = config.lam
        if lam is None:
            lam = default_penalty_weight(cost, region)
        penalty = build_penalty(state.prev_seam, region, lam)
        effective = CostField(e=cost.e + penalty.D, S_m=cost.S_m, S_d=cost.S_d)
    # ragged warp-field masks can strand the centroid anchors; the
    # re-anchored search keeps such frames stitchable
    seam = find_seam_reanchored(effective, region)

    t2 = time.perf_counter()
    levels = model.pyramid_levels(config)
    if model._fill_a is False:
        model._fill_a = fill_indices(warped_a.mask)
        model._fill_b = fill_indices(warped_b.mask)
    stitched = blend_warped(
        warped_a, warped_b, seam, model.canvas, levels, clip=(0.0, 255.0),
        fill_a=model._fill_a, fill_b=model._fill_b,
    )
    t3 = time.perf_counter()

    new_state = FrameState(
        prev_seam=seam,
        frame_index=state.frame_index + 1,
        timing={"warp": t1 - t0, "seam": t2 - t1, "blend": t3 - t2},
    )
    return stitched, new_state


_SENTINEL = object()


def run(
    stream_a,
    stream_b,
    config: StitchConfig,
    sink=None,
    matches=None,
    diag_sink=None,
) -> RunStats:
    """Stitch two synchronized frame streams.

    Aligns at frame 0 and, when realign_interval is nonzero, at every
    multiple of it; a failed re-alignment keeps the previous model (a
    failure with no model at all propagates). Each stitched frame goes to
    sink(index, frame) in order. Unequal stream lengths truncate to the
    shorter side with a warning recorded in the stats.

    A precomputed MatchSet replaces the internal matcher at every
    alignment (the rig transform is static, so frame-0 matches stay
    valid). diag_sink(index, stitched, state, model, realigned) is called
    after each frame for overlay rendering and similar inspection."""
    it_a, it_b = iter(stream_a), iter(stream_b)
    model: AlignmentModel | None = None
    state = FrameState()
    warnings: list = []
    stage_times: dict = {"warp": [], "seam": [], "blend": [], "align": []}
    alignments = 0
    failures = 0
    truncated = 0
    idx = 0

    t_start = time.perf_counter()
    while True:
        fa = next(it_a, _SENTINEL)
        fb = next(it_b, _SENTINEL)
        if fa is _SENTINEL or fb is _SENTINEL:
            if (fa is _SENTINEL) != (fb is _SENTINEL):
                rest = it_b if fa is _SENTINEL else it_a
                truncated = 1 + sum(1 for _ in rest)
                warnings.append(
                    f"stream length mismatch: dropped {truncated} trailing "
                    "frames from the longer stream"
                )
            break

        due = model is None or (
            config.realign_interval > 0 and idx % config.realign_interval == 0
        )
        realigned = False
        if due:
            t0 = time.perf_counter()
            try:
                model = align(fa, fb, config, frame_index=idx, matches=matches)
                alignments += 1
                realigned = True
                # new canvas invalidates the previous seam
                state = FrameState(prev_seam=None, frame_index=state.frame_index)
            except AlignmentError:
                failures += 1
                if model is None:
                    raise
            stage_times["align"].append(time.perf_counter() - t0)

        stitched, state = stitch_frame(fa, fb, model, state, config)
        for key in ("warp", "seam", "blend"):
            stage_times[key].append(state.timing[key])
        if sink is not None:
            sink(idx, stitched)
        if diag_sink is not None:
            diag_sink(idx, stitched, state, model, realigned)
        idx += 1
    total = time.perf_counter() - t_start

    stage_stats = {}
    for key, times in stage_times.items():
        if times:
            stage_stats[key] = {
                "mean": float(np.mean(times)),
                "p95": float(np.percentile(times, 95)),
            }
    return RunStats(
        frames=idx,
        alignments=alignments,
        alignment_failures=failures,
        truncated_frames=truncated,
        fps=idx / total if total > 0 else 0.0,
        stage_stats=stage_stats,
        warnings=warnings,
    )
