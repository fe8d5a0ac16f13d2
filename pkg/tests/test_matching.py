"""Tests for detection, matching, and inlier selection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidstitch.errors import InsufficientDataError, NoInliersError
from vidstitch.geometry import apply_homography
from vidstitch.matching import (
    Keypoint,
    MatchSet,
    SelectionParams,
    conditional_inlier_probability,
    detect_and_describe,
    generate_hypotheses,
    match_descriptors,
    rank_hypotheses,
    select_inliers,
)

# ---------------------------------------------------------------------------
# oracles


def checkerboard(square=32, squares=8):
    tile = np.kron(np.indices((squares, squares)).sum(axis=0) % 2,
                   np.ones((square, square)))
    return (tile * 255.0).astype(np.float64)


def textured_image(rng, shape=(240, 320)):
    from scipy.ndimage import gaussian_filter

    img = gaussian_filter(rng.uniform(0, 255, size=shape), 2.0)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) * 255.0


def random_keypoint(rng, descriptor):
    return Keypoint(
        position=rng.uniform(20, 200, size=2),
        scale=1.0,
        orientation=0.0,
        descriptor=descriptor,
    )


def planar_matches(rng, n=100, noise=0.0, extent=(640, 480)):
    """Matches from one exact homography, optionally with coordinate noise."""
    H = np.array([
        [1.05, 0.02, 8.0],
        [-0.01, 0.98, -5.0],
        [1e-5, -2e-5, 1.0],
    ])
    src = np.empty((n, 2))
    src[:, 0] = rng.uniform(10, extent[0] - 10, size=n)
    src[:, 1] = rng.uniform(10, extent[1] - 10, size=n)
    dst = apply_homography(H, src)
    if noise > 0:
        dst = dst + rng.normal(0.0, noise, size=dst.shape)
    return MatchSet(src=src, dst=dst, scores=np.zeros(n)), H


def contaminated_matches(rng, n_inliers=60, n_outliers=60, noise=0.25):
    """Planar inliers plus gross outliers displaced by at least 20 px."""
    ms, H = planar_matches(rng, n=n_inliers, noise=noise)
    out_src = np.empty((n_outliers, 2))
    out_src[:, 0] = rng.uniform(10, 630, size=n_outliers)
    out_src[:, 1] = rng.uniform(10, 470, size=n_outliers)
    true_dst = apply_homography(H, out_src)
    angles = rng.uniform(0, 2 * np.pi, size=n_outliers)
    radii = rng.uniform(20.0, 120.0, size=n_outliers)
    out_dst = true_dst + np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    src = np.vstack([ms.src, out_src])
    dst = np.vstack([ms.dst, out_dst])
    labels = np.concatenate([np.ones(n_inliers, dtype=bool), np.zeros(n_outliers, dtype=bool)])
    perm = rng.permutation(len(src))
    return MatchSet(src[perm], dst[perm], np.zeros(len(src))), labels[perm]


# ---------------------------------------------------------------------------
# detector


class TestDetector:
    def test_flat_image_empty(self):
        img = np.full((200, 200), 128.0)
        assert detect_and_describe(img) == []

    def test_checkerboard_corner_coverage(self):
        img = checkerboard(square=32, squares=8)
        kps = detect_and_describe(img)
        assert len(kps) > 0
        positions = np.stack([kp.position for kp in kps])
        # every interior lattice corner away from the border margin has a
        # detection within a few pixels
        missing = 0
        total = 0
        for gx in range(1, 8):
            for gy in range(1, 8):
                corner = np.array([gx * 32.0, gy * 32.0])
                if (corner < 16).any() or corner[0] > 240 or corner[1] > 240:
                    continue
                total += 1
                d = np.linalg.norm(positions - corner, axis=1).min()
                if d > 4.0:
                    missing += 1
        assert total > 20
        assert missing == 0

    def test_translation_repeatability(self):
        rng = np.random.default_rng(40)
        base = textured_image(rng, shape=(240, 340))
        img_a = base[:, :320]
        img_b = base[:, 10:330]   # same content shifted left by 10 px
        kps_a = detect_and_describe(img_a)
        kps_b = detect_and_describe(img_b)
        assert len(kps_a) > 30
        pos_a = np.stack([kp.position for kp in kps_a])
        pos_b = np.stack([kp.position for kp in kps_b])
        # keypoint at x in a should appear at x - 10 in b
        interior = (pos_a[:, 0] > 30) & (pos_a[:, 0] < 290)
        shifted = pos_a[interior] - np.array([10.0, 0.0])
        d = np.linalg.norm(shifted[:, None, :] - pos_b[None, :, :], axis=2).min(axis=1)
        assert (d <= 1.5).mean() >= 0.7

    def test_positions_inside_image(self):
        rng = np.random.default_rng(41)
        img = textured_image(rng)
        for kp in detect_and_describe(img):
            assert 0 <= kp.position[0] < img.shape[1]
            assert 0 <= kp.position[1] < img.shape[0]
            assert kp.descriptor.shape == (128,)


class TestMatchDescriptors:
    def test_identical_sets_self_match(self):
        rng = np.random.default_rng(42)
        kps = [random_keypoint(rng, rng.normal(size=128)) for _ in range(30)]
        for kp in kps:
            kp.descriptor /= np.linalg.norm(kp.descriptor)
        ms = match_descriptors(kps, kps)
        assert len(ms) == 30
        np.testing.assert_allclose(ms.src, ms.dst)
        np.testing.assert_allclose(ms.scores, 0.0, atol=1e-5)

    def test_disjoint_random_near_empty(self):
        rng = np.random.default_rng(43)
        hits = 0
        for _ in range(10):
            a = [random_keypoint(rng, rng.normal(size=128)) for _ in range(40)]
            b = [random_keypoint(rng, rng.normal(size=128)) for _ in range(40)]
            hits += len(match_descriptors(a, b))
        assert hits <= 0.05 * 400

    def test_planted_pairs_recovered(self):
        rng = np.random.default_rng(44)
        shared = [rng.normal(size=128) for _ in range(50)]
        a = [random_keypoint(rng, d + rng.normal(scale=0.01, size=128)) for d in shared]
        a += [random_keypoint(rng, rng.normal(size=128)) for _ in range(50)]
        b = [random_keypoint(rng, d + rng.normal(scale=0.01, size=128)) for d in shared]
        b += [random_keypoint(rng, rng.normal(size=128)) for _ in range(50)]
        ms = match_descriptors(a, b)
        recovered = 0
        for i in range(50):
            hit = np.nonzero(
                (np.linalg.norm(ms.src - a[i].position, axis=1) < 1e-9)
                & (np.linalg.norm(ms.dst - b[i].position, axis=1) < 1e-9)
            )[0]
            recovered += len(hit)
        assert recovered >= 45

    def test_empty_input(self):
        assert len(match_descriptors([], [])) == 0


# ---------------------------------------------------------------------------
# hypothesis generation and ranking


class TestGenerateHypotheses:
    def test_planar_hypotheses_all_accurate(self):
        rng = np.random.default_rng(45)
        ms, H = planar_matches(rng, n=120)
        params = SelectionParams(M0=10, M=100)
        hyps = generate_hypotheses(ms, params, seed=7)
        assert hyps.count == 100
        table = rank_hypotheses(ms, hyps)
        assert table.residuals.max() < 1e-6

    def test_m_equals_m0_uniform_only(self):
        rng = np.random.default_rng(46)
        ms, _ = planar_matches(rng, n=50)
        params = SelectionParams(M0=10, M=10)
        hyps = generate_hypotheses(ms, params, seed=3)
        assert hyps.count == 10

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(47)
        ms, _ = contaminated_matches(rng)
        params = SelectionParams(M0=10, M=60)
        a = generate_hypotheses(ms, params, seed=11)
        b = generate_hypotheses(ms, params, seed=11)
        np.testing.assert_array_equal(a.hypotheses, b.hypotheses)
        np.testing.assert_array_equal(a.subsets, b.subsets)

    def test_distinct_subsets(self):
        rng = np.random.default_rng(48)
        ms, _ = planar_matches(rng, n=30)
        hyps = generate_hypotheses(ms, SelectionParams(M0=10, M=80), seed=5)
        keys = {tuple(row) for row in hyps.subsets}
        assert len(keys) == hyps.count

    def test_insufficient_matches(self):
        ms = MatchSet(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3))
        with pytest.raises(InsufficientDataError):
            generate_hypotheses(ms, SelectionParams(), seed=0)

    def test_subset_exhaustion_stops_early(self):
        rng = np.random.default_rng(49)
        ms, _ = planar_matches(rng, n=5)
        hyps = generate_hypotheses(ms, SelectionParams(M0=2, M=500), seed=1)
        # C(5, 4) = 5 distinct subsets at most
        assert 1 <= hyps.count <= 5


class TestRankHypotheses:
    def test_single_hypothesis(self):
        rng = np.random.default_rng(50)
        ms, H = planar_matches(rng, n=10)
        from vidstitch.matching import HypothesisSet

        hyps = HypothesisSet(hypotheses=H[None], subsets=np.arange(4)[None])
        table = rank_hypotheses(ms, hyps)
        assert table.ranked_lists.shape == (10, 1)
        assert (table.ranked_lists == 0).all()

    def test_exact_hypothesis_ranks_first(self):
        rng = np.random.default_rng(51)
        ms, H = planar_matches(rng, n=20)
        from vidstitch.matching import HypothesisSet

        T = np.eye(3)
        T[0, 2] = 50.0  # offset warp: >= 1 px off everywhere
        hyps = HypothesisSet(
            hypotheses=np.stack([T @ H, H]), subsets=np.tile(np.arange(4), (2, 1))
        )
        table = rank_hypotheses(ms, hyps)
        assert (table.ranked_lists[:, 0] == 1).all()

    def test_tie_goes_to_lower_index(self):
        rng = np.random.default_rng(52)
        ms, H = planar_matches(rng, n=10)
        from vidstitch.matching import HypothesisSet

        hyps = HypothesisSet(hypotheses=np.stack([H, H]), subsets=np.tile(np.arange(4), (2, 1)))
        table = rank_hypotheses(ms, hyps)
        assert (table.ranked_lists[:, 0] == 0).all()

    def test_lists_are_sorted_permutations(self):
        rng = np.random.default_rng(53)
        ms, _ = contaminated_matches(rng, n_inliers=30, n_outliers=30)
        hyps = generate_hypotheses(ms, SelectionParams(M0=10, M=40), seed=2)
        table = rank_hypotheses(ms, hyps)
        for i in range(len(ms)):
            lst = table.ranked_lists[i]
            assert sorted(lst) == list(range(hyps.count))
            seq = table.residuals[i, lst]
            assert (np.diff(seq) >= 0).all()


class TestConditionalProbability:
    def test_identical_lists(self):
        lst = np.arange(20)
        assert conditional_inlier_probability(lst, lst, 10) == 1.0

    def test_disjoint_prefixes(self):
        a = np.arange(20)
        b = np.arange(20)[::-1]
        assert conditional_inlier_probability(a, b, 10) == 0.0

    def test_half_shared(self):
        a = np.arange(20)
        b = np.concatenate([np.arange(5), np.arange(10, 25)])
        assert conditional_inlier_probability(a, b, 10) == 0.5

    def test_m_out_of_range(self):
        lst = np.arange(5)
        with pytest.raises(ValueError):
            conditional_inlier_probability(lst, lst, 6)
        with pytest.raises(ValueError):
            conditional_inlier_probability(lst, lst, 0)

    @given(st.integers(min_value=1, max_value=30))
    @settings(max_examples=20, deadline=None)
    def test_symmetry_and_range(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.permutation(40)
        b = rng.permutation(40)
        m = int(rng.integers(1, 40))
        fab = conditional_inlier_probability(a, b, m)
        fba = conditional_inlier_probability(b, a, m)
        assert fab == fba
        assert 0.0 <= fab <= 1.0
        assert conditional_inlier_probability(a, a, m) == 1.0


# ---------------------------------------------------------------------------
# inlier selection


class TestSelectInliers:
    def test_planar_selects_everything(self):
        rng = np.random.default_rng(54)
        ms, _ = planar_matches(rng, n=80)
        params = SelectionParams(M0=10, M=100)
        hyps = generate_hypotheses(ms, params, seed=9)
        table = rank_hypotheses(ms, hyps)
        sel = select_inliers(ms, table, hyps, params)
        assert len(sel) == len(ms)

    def test_planted_outliers_rejected(self):
        recalls = []
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            ms, labels = contaminated_matches(rng)
            params = SelectionParams()
            hyps = generate_hypotheses(ms, params, seed=seed)
            table = rank_hypotheses(ms, hyps)
            sel = select_inliers(ms, table, hyps, params)
            sel_keys = {(round(x, 6), round(y, 6)) for x, y in sel.src}
            true_in = {(round(x, 6), round(y, 6)) for x, y in ms.src[labels]}
            true_out = {(round(x, 6), round(y, 6)) for x, y in ms.src[~labels]}
            assert not (sel_keys & true_out), "gross outlier selected"
            recalls.append(len(sel_keys & true_in) / len(true_in))
        assert min(recalls) >= 0.9

    def test_boundary_minimal_set(self):
        rng = np.random.default_rng(55)
        ms, _ = planar_matches(rng, n=4)
        params = SelectionParams(M0=1, M=1, m=1)
        hyps = generate_hypotheses(ms, params, seed=0)
        table = rank_hypotheses(ms, hyps)
        sel = select_inliers(ms, table, hyps, params)
        assert len(sel) == 4

    def test_no_candidates_raises(self):
        rng = np.random.default_rng(56)
        ms, H = planar_matches(rng, n=20)
        bad = MatchSet(ms.src, ms.dst + 500.0, ms.scores)
        from vidstitch.matching import HypothesisSet

        hyps = HypothesisSet(hypotheses=H[None], subsets=np.arange(4)[None])
        table = rank_hypotheses(bad, hyps)
        with pytest.raises(NoInliersError):
            select_inliers(bad, table, hyps, SelectionParams())

    def test_permutation_invariant(self):
        rng = np.random.default_rng(57)
        ms, labels = contaminated_matches(rng, n_inliers=40, n_outliers=40)
        params = SelectionParams(M0=10, M=120)
        hyps = generate_hypotheses(ms, params, seed=4)
        table = rank_hypotheses(ms, hyps)
        sel_a = select_inliers(ms, table, hyps, params)

        perm = rng.permutation(len(ms))
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        ms_p = MatchSet(ms.src[perm], ms.dst[perm], ms.scores[perm])
        from vidstitch.matching import HypothesisSet, ResidualTable

        table_p = ResidualTable(
            residuals=table.residuals[perm], ranked_lists=table.ranked_lists[perm]
        )
        hyps_p = HypothesisSet(hypotheses=hyps.hypotheses, subsets=inv[hyps.subsets])
        sel_b = select_inliers(ms_p, table_p, hyps_p, params)
        keys_a = sorted(map(tuple, np.round(sel_a.src, 9)))
        keys_b = sorted(map(tuple, np.round(sel_b.src, 9)))
        assert keys_a == keys_b

    def test_output_is_subset(self):
        rng = np.random.default_rng(58)
        ms, _ = contaminated_matches(rng, n_inliers=30, n_outliers=30)
        params = SelectionParams(M0=10, M=80)
        hyps = generate_hypotheses(ms, params, seed=6)
        table = rank_hypotheses(ms, hyps)
        sel = select_inliers(ms, table, hyps, params)
        all_keys = set(map(tuple, ms.src))
        for p in sel.src:
            assert tuple(p) in all_keys

    def test_first_mode_runs(self):
        rng = np.random.default_rng(59)
        ms, _ = planar_matches(rng, n=40)
        params = SelectionParams(M0=10, M=50)
        hyps = generate_hypotheses(ms, params, seed=8)
        table = rank_hypotheses(ms, hyps)
        sel = select_inliers(ms, table, hyps, params, mode="first")
        assert len(sel) >= 4
        with pytest.raises(ValueError):
            select_inliers(ms, table, hyps, params, mode="bogus")


class TestSelectionParams:
    def test_paper_defaults(self):
        p = SelectionParams()
        assert (p.s, p.eps_o, p.eps_r, p.M0, p.M, p.m) == (4, 1.0, 0.01, 10, 500, 50)

    def test_validation(self):
        with pytest.raises(ValueError):
            SelectionParams(s=3)
        with pytest.raises(ValueError):
            SelectionParams(M0=0)
        with pytest.raises(ValueError):
            SelectionParams(M=5, M0=10)
        with pytest.raises(ValueError):
            SelectionParams(m=0)
        with pytest.raises(ValueError):
            SelectionParams(eps_r=2.0)
