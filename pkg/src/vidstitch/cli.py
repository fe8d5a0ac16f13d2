"""Command-line front end.

Subcommands: `stitch` runs the full pipeline over two frame directories,
`synth` renders a synthetic paired sequence with ground truth, and `eval`
scores alignment quality against a truth file. Exit codes: 0 success,
1 usage or parse error, 2 I/O error, 3 alignment failure with no fallback
model; every failure prints a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .errors import (
    AlignmentError,
    ConfigError,
    FrameIOError,
    MatchFileError,
    StitchError,
)
from .geometry import (
    apply_homography,
    compute_canvas,
    estimate_global_homography,
    warp_image,
)
from .pipeline import StitchConfig, align, run
from .seam import compute_gradient_cost, compute_overlap, find_seam_reanchored
from .synth import SquareSpec, make_default_scene, make_sequence, read_truth


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vidstitch")
    sub = parser.add_subparsers(dest="command", required=True)

    st = sub.add_parser("stitch", help="stitch two synchronized frame dirs")
    st.add_argument("--left", required=True, help="wide-angle frame dir")
    st.add_argument("--right", required=True, help="fisheye frame dir")
    st.add_argument("--out", required=True, help="output dir")
    st.add_argument("--config", help="key=value config file")
    st.add_argument("--matches", help="external correspondence file")
    st.add_argument("--realign-interval", type=int, default=None)
    st.add_argument("--seed", type=int, default=None)
    st.add_argument("--diag", help="dir for seam/inlier overlay images")
    st.set_defaults(func=cmd_stitch)

    sy = sub.add_parser("synth", help="render a synthetic paired sequence")
    sy.add_argument("--scene", required=True, help="key=value scene file")
    sy.add_argument("--frames", type=int, required=True)
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="score alignment against ground truth")
    ev.add_argument("--left", required=True)
    ev.add_argument("--right", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--mode", choices=["global", "multi"], required=True)
    ev.set_defaults(func=cmd_eval)
    return parser


def _as_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.copy()
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def _overlay_points(frame, pts, color=(0, 255, 0)) -> np.ndarray:
    img = _as_uint8(frame)
    h, w = img.shape[:2]
    for x, y in np.rint(np.asarray(pts)).astype(int):
        img[max(y - 2, 0):min(y + 3, h), max(x - 2, 0):min(x + 3, w)] = color
    return img


def _overlay_seam(stitched, seam, color=(255, 0, 0)) -> np.ndarray:
    img = _as_uint8(stitched)
    xs = seam.path[:, 0]
    ys = seam.path[:, 1]
    for dx in (-1, 0, 1):
        img[ys, np.clip(xs + dx, 0, img.shape[1] - 1)] = color
    return img


def cmd_stitch(args) -> int:
    config = fileio.load_config(args.config) if args.config else StitchConfig()
    overrides = {}
    if args.realign_interval is not None:
        overrides["realign_interval"] = args.realign_interval
    if args.seed is not None:
        overrides["seed"] = args.seed

    src_a = fileio.FrameSource(args.left)
    src_b = fileio.FrameSource(args.right)
    if src_b.size != src_a.size:
        raise OSError(
            f"frame size mismatch: left {src_a.width}x{src_a.height}, "
            f"right {src_b.width}x{src_b.height}"
        )
    overrides["input_size"] = src_a.size
    config = replace(config, **overrides)

    matches = None
    if args.matches:
        matches = fileio.read_matches(args.matches, src_a.size, src_b.size)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def sink(idx, frame):
        fileio.write_image(out / f"{idx:06d}.png", frame)

    diag_sink = None
    if args.diag:
        diag_dir = Path(args.diag)
        diag_dir.mkdir(parents=True, exist_ok=True)
        current: dict = {}

        def diag_sink(idx, stitched, state, model, realigned):
            if not realigned:
                return
            fileio.write_image(
                diag_dir / f"inliers_{idx:06d}.png",
                _overlay_points(current["a"], model.inlier_src),
            )
            fileio.write_image(
                diag_dir / f"seam_{idx:06d}.png",
                _overlay_seam(stitched, state.prev_seam),
            )

        def tap(stream, key):
            for f in stream:
                current[key] = f
                yield f

        stream_a, stream_b = tap(src_a, "a"), tap(src_b, "b")
    else:
        stream_a, stream_b = iter(src_a), iter(src_b)

    stats = run(stream_a, stream_b, config, sink=sink,
                matches=matches, diag_sink=diag_sink)
    fileio.write_stats(out / "stats.txt", stats)
    print(stats.to_text(), end="")
    return 0


_SCENE_TYPES = {
    "planes": int, "frame_width": int, "frame_height": int,
    "fisheye_focal": float, "match_count": int,
    "noise_sigma": float, "outlier_fraction": float,
    "motion_x": float, "motion_y": float,
    "square_size": int, "square_x": float, "square_y": float,
    "square_vx": float, "square_vy": float,
}


def cmd_synth(args) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    path = Path(args.scene)
    text = path.read_text(encoding="ascii")
    vals = fileio.coerce_values(
        fileio.parse_keyvalues(text, str(path)), str(path), _SCENE_TYPES
    )

    size = (vals.pop("frame_width", 320), vals.pop("frame_height", 240))
    motion = (vals.pop("motion_x", 0.0), vals.pop("motion_y", 0.0))
    square = None
    if any(k.startswith("square_") for k in vals):
        square = SquareSpec(
            size=vals.pop("square_size", 24),
            start=(
                vals.pop("square_x", 0.6 * size[0]),
                vals.pop("square_y", 0.4 * size[1]),
            ),
            velocity=(vals.pop("square_vx", 2.0), vals.pop("square_vy", 0.0)),
        )
    spec = make_default_scene(seed=args.seed, frame_size=size, **vals)
    seq = make_sequence(spec, motion=motion, frames=args.frames, square=square)

    out = Path(args.out)
    for sub in ("left", "right", "truth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for k in range(args.frames):
        fileio.write_image(out / "left" / f"{k:06d}.png", seq.frames_a[k])
        fileio.write_image(out / "right" / f"{k:06d}.png", seq.frames_b[k])
        truth_path = out / "truth" / f"{k:06d}.txt"
        lines = ["# x1 y1 x2 y2 label plane_id"]
        t = seq.truths[k]
        for s, d, lab, pid in zip(t.src, t.dst, t.inlier, t.plane_id):
            name = "inlier" if lab else "outlier"
            lines.append(
                f"{s[0]:.6f} {s[1]:.6f} {d[0]:.6f} {d[1]:.6f} {name} {int(pid)}"
            )
        fileio.write_text(truth_path, "\n".join(lines) + "\n")
    return 0


def cmd_eval(args) -> int:
    src_a = fileio.FrameSource(args.left)
    src_b = fileio.FrameSource(args.right)
    truth = read_truth(args.truth)
    frame_a = next(iter(src_a))
    frame_b = next(iter(src_b))
    config = fileio.with_input_size(StitchConfig(), src_a.size)
    model = align(frame_a, frame_b, config)

    keep = truth.inlier
    src, dst = truth.src[keep], truth.dst[keep]
    if args.mode == "multi":
        pts_a = np.stack([
            apply_homography(
                model.warp_field_a.homography_at(p[0], p[1]), p[None, :]
            )[0]
            for p in src
        ])
        warp_a = model.warp_field_a
        warp_b = model.warp_b
        canvas = model.canvas
    else:
        # score the single global homography with its own best second-image
        # compensation so the comparison isolates the first-image warp
        warp_a = model.global_h
        warp_b = estimate_global_homography(
            model.inlier_dst, apply_homography(model.global_h, model.inlier_src)
        )
        extent = (frame_a.shape[1], frame_a.shape[0])
        canvas = compute_canvas(extent, warp_a, extent, warp_b)
        pts_a = apply_homography(warp_a, src)
    pts_b = apply_homography(warp_b, dst)
    rmse = float(np.sqrt(np.mean(np.sum((pts_a - pts_b) ** 2, axis=1))))

    warped_a = warp_image(frame_a, warp_a, canvas)
    warped_b = warp_image(frame_b, warp_b, canvas)
    region = compute_overlap(warped_a, warped_b)
    cost = compute_gradient_cost(region, warped_a.pixels, warped_b.pixels)
    seam = find_seam_reanchored(cost, region)
    # seam path is in canvas coords; the cost raster covers the overlap bbox
    x0, y0 = region.bounds[0], region.bounds[1]
    along = cost.e[seam.path[:, 1] - y0, seam.path[:, 0] - x0]

    print(f"mode {args.mode}")
    print(f"truth_points {len(truth.src)}")
    print(f"truth_inliers {int(keep.sum())}")
    print(f"rmse_px {rmse:.4f}")
    print(f"seam_length {len(along)}")
    print(f"seam_cost_mean {float(along.mean()):.6f}")
    print(f"seam_cost_max {float(along.max()):.6f}")
    print(f"seam_cost_total {float(along.sum()):.6f}")
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except AlignmentError as exc:
        print(f"alignment error: {exc}", file=sys.stderr)
        return 3
    except (FrameIOError, MatchFileError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except StitchError as exc:
        print(f"alignment error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
