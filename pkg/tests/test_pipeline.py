"""Tests for alignment caching, per-frame stitching, and run orchestration."""

import numpy as np
import pytest

import vidstitch.pipeline as pipeline
from vidstitch.errors import AlignmentError
from vidstitch.geometry import CanvasExtent, WarpField, apply_homography
from vidstitch.pipeline import (
    AlignmentDiagnostics,
    AlignmentModel,
    FrameState,
    StitchConfig,
    align,
    run,
    stitch_frame,
)
from vidstitch.synth import (
    SquareSpec,
    fisheye_forward,
    frame_center,
    make_default_scene,
    make_sequence,
    render_pair,
)

SIZE = (320, 240)


def small_config(**kw):
    kw.setdefault("input_size", SIZE)
    return StitchConfig(**kw)


def identity_model(w, h):
    return AlignmentModel(
        warp_field_a=WarpField(
            grid=np.eye(3)[None, None],
            cell_size=1 << 20,
            source_extent=(w, h),
            rotation_theta=0.0,
            u_min=0.0,
            u_max=1.0,
        ),
        warp_b=np.eye(3),
        canvas=CanvasExtent(offset=(0.0, 0.0), width=w, height=h),
        inlier_diag=AlignmentDiagnostics(0, 0, 0.0, 0.0, 0),
        frame_estimated=0,
    )


@pytest.fixture(scope="module")
def planar_scene():
    spec = make_default_scene(seed=20, frame_size=SIZE, planes=1,
                              fisheye_focal=1e7)
    frame_a, frame_b, truth = render_pair(spec)
    return spec, frame_a, frame_b, truth


@pytest.fixture(scope="module")
def fisheye_scene():
    spec = make_default_scene(seed=21, frame_size=SIZE, planes=2)
    frame_a, frame_b, truth = render_pair(spec)
    return spec, frame_a, frame_b, truth


class TestAlign:
    def test_self_alignment_near_identity(self, fisheye_scene):
        _, frame_a, _, _ = fisheye_scene
        model = align(frame_a, frame_a, small_config())
        xs = np.linspace(10, SIZE[0] - 10, 12)
        ys = np.linspace(10, SIZE[1] - 10, 9)
        worst = 0.0
        for x in xs:
            for y in ys:
                H = model.warp_field_a.homography_at(x, y)
                p = apply_homography(H, np.array([[x, y]]))[0]
                worst = max(worst, float(np.hypot(p[0] - x, p[1] - y)))
        assert worst < 0.5

    def test_planar_pair_overlap_rmse(self, planar_scene):
        spec, frame_a, frame_b, truth = planar_scene
        model = align(frame_a, frame_b, small_config())
        pts_a = np.stack(
            [
                apply_homography(
                    model.warp_field_a.homography_at(p[0], p[1]), p[None, :]
                )[0]
                for p in truth.src
            ]
        )
        pts_b = apply_homography(model.warp_b, truth.dst)
        rmse = float(np.sqrt(np.mean(np.sum((pts_a - pts_b) ** 2, axis=1))))
        assert rmse < 1.0

    def test_featureless_frames_fail(self):
        blank = np.zeros((SIZE[1], SIZE[0], 3), dtype=np.float32)
        with pytest.raises(AlignmentError):
            align(blank, blank, small_config())

    def test_wrong_size_rejected(self, fisheye_scene):
        _, frame_a, frame_b, _ = fisheye_scene
        cfg = StitchConfig(input_size=(640, 480))
        with pytest.raises(ValueError):
            align(frame_a, frame_b, cfg)

    def test_diagnostics_populated(self, fisheye_scene):
        _, frame_a, frame_b, _ = fisheye_scene
        model = align(frame_a, frame_b, small_config())
        d = model.inlier_diag
        assert d.inlier_count >= 4
        assert d.match_count >= d.inlier_count
        assert d.mean_residual <= d.max_residual
        assert model.frame_estimated == 0


class TestStitchFrame:
    def test_identity_model_identity_content(self):
        rng = np.random.default_rng(22)
        w, h = 64, 48
        frame = rng.uniform(0, 255, size=(h, w, 3)).astype(np.float32)
        cfg = StitchConfig(input_size=(w, h))
        model = identity_model(w, h)
        out, state = stitch_frame(frame, frame.copy(), model, FrameState(), cfg)
        assert out.shape == (h, w, 3)
        assert np.max(np.abs(out - frame)) < 1e-3
        assert state.prev_seam is not None
        assert state.frame_index == 0

    def test_static_repeat_identical(self, fisheye_scene):
        _, frame_a, frame_b, _ = fisheye_scene
        cfg = small_config()
        model = align(frame_a, frame_b, cfg)
        out1, s1 = stitch_frame(frame_a, frame_b, model, FrameState(), cfg)
        out2, s2 = stitch_frame(frame_a, frame_b, model, s1, cfg)
        np.testing.assert_array_equal(out1, out2)
        np.testing.assert_array_equal(s1.prev_seam.path, s2.prev_seam.path)

    def test_output_fully_defined(self, fisheye_scene):
        _, frame_a, frame_b, _ = fisheye_scene
        cfg = small_config()
        model = align(frame_a, frame_b, cfg)
        out, _ = stitch_frame(frame_a, frame_b, model, FrameState(), cfg)
        assert np.all(np.isfinite(out))
        assert out.shape[:2] == (model.canvas.height, model.canvas.width)

    def test_timings_recorded(self, fisheye_scene):
        _, frame_a, frame_b, _ = fisheye_scene
        cfg = small_config()
        model = align(frame_a, frame_b, cfg)
        _, state = stitch_frame(frame_a, frame_b, model, FrameState(), cfg)
        assert set(state.timing) == {"warp", "seam", "blend"}
        assert all(t >= 0 for t in state.timing.values())

    def test_seam_avoids_ghosted_moving_object(self):
        spec = make_default_scene(seed=23, frame_size=SIZE, planes=1,
                                  match_count=120)
        square = SquareSpec(size=28, start=(190.0, 100.0), velocity=(10.0, 0.0))
        seq = make_sequence(spec, motion=(0.0, 0.0), frames=3, square=square)
        cfg = small_config()
        model = align(seq.frames_a[0], seq.frames_b[0], cfg)
        # desynchronized pair: the square sits at position 1 in A, 2 in B
        out, state = stitch_frame(seq.frames_a[1], seq.frames_b[2], model,
                                  FrameState(), cfg)
        seam = state.prev_seam.path

        H = spec.planes[0][1]
        center = frame_center(SIZE)
        off = model.canvas.offset
        boxes = []
        for k in (1, 2):
            sx = square.start[0] + square.velocity[0] * k
            sy = square.start[1] + square.velocity[1] * k
            corners = np.array(
                [[sx, sy], [sx + 28, sy], [sx, sy + 28], [sx + 28, sy + 28]]
            )
            if k == 1:     # appears in frame A: through the warp field
                warped = np.stack(
                    [
                        apply_homography(
                            model.warp_field_a.homography_at(c[0], c[1]),
                            c[None, :],
                        )[0]
                        for c in corners
                    ]
                )
            else:          # appears in frame B: fisheye then compensation
                fis = fisheye_forward(
                    apply_homography(H, corners), center, spec.fisheye_focal
                )
                warped = apply_homography(model.warp_b, fis)
            xs = warped[:, 0] - off[0]
            ys = warped[:, 1] - off[1]
            boxes.append((xs.min() + 3, xs.max() - 3, ys.min() + 3, ys.max() - 3))

        for x0, x1, y0, y1 in boxes:
            inside = (
                (seam[:, 0] >= x0) & (seam[:, 0] <= x1)
                & (seam[:, 1] >= y0) & (seam[:, 1] <= y1)
            )
            assert not inside.any(), "seam crosses a ghosted object interior"


class TestRun:
    def _static_streams(self, n=6):
        spec = make_default_scene(seed=24, frame_size=SIZE, match_count=120)
        frame_a, frame_b, _ = render_pair(spec)
        return [frame_a] * n, [frame_b] * n

    def test_align_once_and_static_outputs(self):
        sa, sb = self._static_streams(6)
        outs = {}
        stats = run(sa, sb, small_config(), sink=lambda i, f: outs.update({i: f}))
        assert stats.frames == 6
        assert stats.alignments == 1
        assert stats.alignment_failures == 0
        assert stats.truncated_frames == 0
        for k in range(1, 6):
            np.testing.assert_array_equal(outs[k], outs[0])

    def test_matching_stage_runs_once(self, monkeypatch):
        calls = {"n": 0}
        orig = pipeline.match_descriptors

        def counted(*a, **kw):
            calls["n"] += 1
            return orig(*a, **kw)

        monkeypatch.setattr(pipeline, "match_descriptors", counted)
        sa, sb = self._static_streams(5)
        run(sa, sb, small_config())
        assert calls["n"] == 1

    def test_realign_schedule(self):
        sa, sb = self._static_streams(10)
        stats = run(sa, sb, small_config(realign_interval=5))
        assert stats.alignments == 2

    def test_failure_fallback(self):
        sa, sb = self._static_streams(10)
        blank = np.zeros_like(sa[0])
        sa[5] = blank
        sb[5] = blank
        stats = run(sa, sb, small_config(realign_interval=5))
        assert stats.frames == 10
        assert stats.alignments == 1
        assert stats.alignment_failures == 1

    def test_first_alignment_failure_propagates(self):
        blank = np.zeros((SIZE[1], SIZE[0], 3), dtype=np.float32)
        with pytest.raises(AlignmentError):
            run([blank] * 2, [blank] * 2, small_config())

    def test_length_mismatch_truncates_with_warning(self):
        sa, sb = self._static_streams(5)
        stats = run(sa, sb[:3], small_config())
        assert stats.frames == 3
        assert stats.truncated_frames == 2
        assert any("mismatch" in w for w in stats.warnings)

    def test_determinism_across_runs(self):
        sa, sb = self._static_streams(3)
        outs1, outs2 = [], []
        run(sa, sb, small_config(), sink=lambda i, f: outs1.append(f))
        run(sa, sb, small_config(), sink=lambda i, f: outs2.append(f))
        for f1, f2 in zip(outs1, outs2):
            np.testing.assert_array_equal(f1, f2)

    def test_stats_text_format(self):
        sa, sb = self._static_streams(3)
        stats = run(sa, sb, small_config())
        text = stats.to_text()
        lines = text.strip().split("\n")
        keys = [ln.split(" ", 1)[0] for ln in lines]
        assert "frames" in keys and "fps" in keys
        assert "warp_mean_s" in keys and "seam_p95_s" in keys
        parsed = dict(ln.split(" ", 1) for ln in lines)
        assert int(parsed["frames"]) == 3
        assert float(parsed["fps"]) > 0


class TestStitchConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            StitchConfig(realign_interval=-1)
        with pytest.raises(ValueError):
            StitchConfig(input_size=(8, 8))
        with pytest.raises(ValueError):
            StitchConfig(cell_size=0)

    def test_default_profile_scales_with_size(self):
        small = StitchConfig(input_size=(320, 240)).resolved_profile()
        large = StitchConfig(input_size=(640, 480)).resolved_profile()
        assert large.sigma == pytest.approx(2 * small.sigma)
        assert small.gamma == 0.01

    def test_paper_selection_defaults(self):
        cfg = StitchConfig()
        assert cfg.selection.s == 4
        assert cfg.selection.eps_o == 1.0
        assert cfg.selection.eps_r == 0.01
        assert cfg.selection.M0 == 10
        assert cfg.selection.M == 500
