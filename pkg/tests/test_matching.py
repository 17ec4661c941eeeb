import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiomotion.errors import CannotAggregate, InvalidParameter
from cardiomotion.imaging import Image
from cardiomotion.matching import (CorrelationMapStack, MatchSet,
                                   aggregate_level, bottom_correlation,
                                   correlation_pyramid, extract_matches,
                                   match_pair, patch_similarity)


def shift_image(a, dx, dy):
    """Integer shift with replicate fill: out(x) = a(x - d)."""
    h, w = a.shape
    ys = np.clip(np.arange(h)[:, None] - dy, 0, h - 1)
    xs = np.clip(np.arange(w)[None, :] - dx, 0, w - 1)
    return a[ys, xs]


def brute_force_ncc(a, b):
    """Direct NCC evaluation oracle on mean-removed patches."""
    am = a - a.mean()
    bm = b - b.mean()
    na, nb = np.linalg.norm(am), np.linalg.norm(bm)
    if na == 0 or nb == 0:
        return 0.0
    return (float(np.sum(am * bm) / (na * nb)) + 1.0) / 2.0


class TestPatchSimilarity:
    def test_self_similarity(self):
        a = np.random.default_rng(0).random((4, 4))
        assert patch_similarity(a, a) == 1.0

    def test_zero_variance(self):
        a = np.full((4, 4), 0.3)
        b = np.random.default_rng(1).random((4, 4))
        assert patch_similarity(a, b) == 0.0
        assert patch_similarity(b, a) == 0.0

    def test_negated_patch_maps_to_zero(self):
        rng = np.random.default_rng(2)
        a = rng.random((4, 4))
        b = 2 * a.mean() - a  # mean-removed negation, stays in [0,1]-ish
        assert abs(patch_similarity(a, b) - brute_force_ncc(a, b)) < 1e-12
        assert patch_similarity(a, b) < 1e-12

    def test_matches_oracle_on_random_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = rng.random((5, 5)), rng.random((5, 5))
            assert abs(patch_similarity(a, b) - brute_force_ncc(a, b)) < 1e-12

    def test_size_mismatch(self):
        with pytest.raises(InvalidParameter):
            patch_similarity(np.zeros((4, 4)), np.zeros((5, 5)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_similarity_symmetry_property(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((4, 4)), rng.random((4, 4))
    assert abs(patch_similarity(a, b) - patch_similarity(b, a)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1),
       st.floats(0.1, 3.0), st.floats(-0.2, 0.2))
def test_similarity_affine_invariance_property(seed, gain, bias):
    rng = np.random.default_rng(seed)
    a, b = rng.random((4, 4)), rng.random((4, 4))
    assert abs(patch_similarity(a, gain * b + bias) - patch_similarity(a, b)) < 1e-10


class TestBottomCorrelation:
    def test_self_match_argmax_at_zero(self):
        img = Image(np.random.default_rng(4).random((32, 32)))
        stack = bottom_correlation(img, img, 4, radius=8)
        center = np.flatnonzero(stack.disp == 0)[0]
        for ay in range(stack.maps.shape[0]):
            for ax in range(stack.maps.shape[1]):
                iy, ix = np.unravel_index(np.argmax(stack.maps[ay, ax]),
                                          stack.maps.shape[2:])
                assert (iy, ix) == (center, center)

    def test_shift_argmax_matches_brute_force(self):
        rng = np.random.default_rng(5)
        base = rng.random((32, 32))
        src, dst = Image(base), Image(shift_image(base, 2, 0))
        stack = bottom_correlation(src, dst, 4, radius=6)
        # brute-force NCC search oracle over interior anchors
        pad = 6
        for ay in range(stack.maps.shape[0]):
            for ax in range(stack.maps.shape[1]):
                x, y = int(stack.anchors_x[ax]), int(stack.anchors_y[ay])
                if not (pad <= x < 32 - pad and pad <= y < 32 - pad):
                    continue
                iy, ix = np.unravel_index(np.argmax(stack.maps[ay, ax]),
                                          stack.maps.shape[2:])
                assert (stack.disp[ix], stack.disp[iy]) == (2, 0)

    def test_constant_images_all_zero(self):
        img = Image(np.full((16, 16), 0.7))
        stack = bottom_correlation(img, img, 4, radius=4)
        assert np.all(stack.maps == 0.0)

    def test_scores_within_unit_interval(self):
        rng = np.random.default_rng(6)
        a, b = Image(rng.random((20, 20))), Image(rng.random((20, 20)))
        stack = bottom_correlation(a, b, 4, radius=5)
        assert stack.maps.min() >= 0.0 and stack.maps.max() <= 1.0

    def test_image_smaller_than_patch(self):
        img = Image(np.zeros((3, 3)))
        with pytest.raises(InvalidParameter):
            bottom_correlation(img, img, 4)

    def test_patch_value_agrees_with_patch_similarity(self):
        rng = np.random.default_rng(7)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        stack = bottom_correlation(Image(a), Image(b), 4, radius=3)
        # anchor at (8, 8); displacement (1, -2); patches cover [c-2, c+2)
        ax = np.flatnonzero(stack.anchors_x == 8)[0]
        ay = np.flatnonzero(stack.anchors_y == 8)[0]
        ix = np.flatnonzero(stack.disp == 1)[0]
        iy = np.flatnonzero(stack.disp == -2)[0]
        expected = patch_similarity(a[6:10, 6:10], b[4:8, 7:11])
        assert abs(stack.maps[ay, ax, iy, ix] - expected) < 1e-12


class TestAggregation:
    def test_self_match_survives_aggregation(self):
        img = Image(np.random.default_rng(8).random((16, 16)))
        top = aggregate_level(bottom_correlation(img, img, 4, radius=4))
        assert top.patch_size == 8
        center = np.flatnonzero(top.disp == 0)[0]
        for ay in range(top.maps.shape[0]):
            for ax in range(top.maps.shape[1]):
                iy, ix = np.unravel_index(np.argmax(top.maps[ay, ax]),
                                          top.maps.shape[2:])
                assert (iy, ix) == (center, center)

    def test_shift_survives_aggregation(self):
        rng = np.random.default_rng(9)
        base = rng.random((32, 32))
        src, dst = Image(base), Image(shift_image(base, 2, 0))
        top = aggregate_level(bottom_correlation(src, dst, 4, radius=6))
        # interior anchors still peak at (2, 0); oracle: 8x8 NCC search
        for ay in range(1, top.maps.shape[0] - 1):
            for ax in range(1, top.maps.shape[1] - 1):
                iy, ix = np.unravel_index(np.argmax(top.maps[ay, ax]),
                                          top.maps.shape[2:])
                assert stackdisp(top, ix) == 2 and stackdisp(top, iy) == 0

    def test_anchor_count_rule(self):
        img = Image(np.random.default_rng(10).random((24, 24)))
        lower = bottom_correlation(img, img, 4, radius=4)
        upper = aggregate_level(lower)
        assert upper.maps.shape[0] == -(-lower.maps.shape[0] // 2)
        assert upper.maps.shape[1] == -(-lower.maps.shape[1] // 2)

    def test_scores_stay_in_unit_interval_and_grid_never_grows(self):
        rng = np.random.default_rng(11)
        a, b = Image(rng.random((32, 32))), Image(rng.random((32, 32)))
        lower = bottom_correlation(a, b, 4, radius=8)
        upper = aggregate_level(lower)
        assert upper.maps.shape[2] <= lower.maps.shape[2]
        assert upper.maps.min() >= 0.0 and upper.maps.max() <= 1.0

    def test_cannot_aggregate_when_patch_covers_image(self):
        img = Image(np.random.default_rng(12).random((16, 16)))
        top = aggregate_level(bottom_correlation(img, img, 4, radius=4))
        with pytest.raises(CannotAggregate):
            aggregate_level(aggregate_level(top))


def stackdisp(stack, idx):
    return int(stack.disp[idx])


class TestExtraction:
    def test_identical_images_zero_displacement(self):
        img = Image(np.random.default_rng(13).random((32, 32)))
        matches = match_pair(img, img, radius=8)
        assert len(matches) > 0
        assert np.all(matches.displacements() == 0)

    def test_shift_pair_exact_displacement(self):
        rng = np.random.default_rng(14)
        base = rng.random((32, 32))
        matches = match_pair(Image(base), Image(shift_image(base, 2, 0)), radius=8)
        d = matches.displacements()
        interior = ((matches.src[:, 0] >= 6) & (matches.src[:, 0] < 26)
                    & (matches.src[:, 1] >= 6) & (matches.src[:, 1] < 26))
        assert interior.sum() > 20
        assert np.all(d[interior] == [2, 0])

    def test_displacement_histogram_mode_at_true_shift(self):
        rng = np.random.default_rng(15)
        base = rng.random((40, 40))
        matches = match_pair(Image(base), Image(shift_image(base, 3, -1)), radius=10)
        d = matches.displacements()
        pairs, counts = np.unique(d, axis=0, return_counts=True)
        assert tuple(pairs[np.argmax(counts)]) == (3, -1)

    def test_constant_images_empty(self):
        img = Image(np.full((32, 32), 0.5))
        assert len(match_pair(img, img, radius=8)) == 0

    def test_threshold_validation(self):
        img = Image(np.random.default_rng(16).random((16, 16)))
        stack = bottom_correlation(img, img, 4, radius=4)
        with pytest.raises(InvalidParameter):
            extract_matches(stack, 0.0)
        with pytest.raises(InvalidParameter):
            extract_matches(stack, 1.0)

    def test_reciprocal_best_is_one_to_one(self):
        rng = np.random.default_rng(17)
        a, b = Image(rng.random((32, 32))), Image(rng.random((32, 32)))
        matches = match_pair(a, b, radius=8, threshold=0.5)
        as_tuples = [tuple(p) for p in matches.dst]
        assert len(as_tuples) == len(set(as_tuples))  # no target claimed twice

    def test_csv_serialization(self, tmp_path):
        img = Image(np.random.default_rng(18).random((16, 16)))
        matches = match_pair(img, img, radius=4)
        path = tmp_path / "m.csv"
        matches.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "x,y,x',y',confidence"
        assert len(lines) == len(matches) + 1

    def test_confidences_positive_and_bounded(self):
        rng = np.random.default_rng(19)
        base = rng.random((32, 32))
        matches = match_pair(Image(base), Image(shift_image(base, 1, 1)), radius=8)
        assert np.all(matches.confidence > 0)
        assert np.all(matches.confidence <= 1.0)
