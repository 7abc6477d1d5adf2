import numpy as np
import pytest

from oracles import naive_complexity, naive_haar
from synthimages import constant_image, gradient_image, noise_image, rgbify

from mpcn import complexity as cx
from mpcn.errors import DatasetError, ShapeError


class TestToGrayscale:
    def test_pure_white(self):
        img = np.full((4, 4, 3), 255, dtype=np.uint8)
        np.testing.assert_allclose(cx.to_grayscale(img), 1.0)

    def test_pure_red(self):
        img = np.zeros((2, 2, 3), dtype=np.uint8)
        img[..., 0] = 255
        np.testing.assert_allclose(cx.to_grayscale(img), 0.299, rtol=1e-12)

    def test_gray_input_passthrough(self):
        img = np.full((3, 3, 3), 100, dtype=np.uint8)
        np.testing.assert_allclose(cx.to_grayscale(img), 100 / 255, rtol=1e-12)

    def test_range(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        gray = cx.to_grayscale(img)
        assert gray.min() >= 0.0 and gray.max() <= 1.0

    def test_rejects_non_rgb(self):
        with pytest.raises(ShapeError):
            cx.to_grayscale(np.zeros((4, 4), dtype=np.uint8))


class TestHaarLevel1:
    def test_constant_input(self):
        approx, detail = cx.haar_level1(np.full((6, 6), 0.5))
        np.testing.assert_allclose(approx, 1.0)  # (4 * 0.5) / 2
        np.testing.assert_allclose(detail.stacked(), 0.0)

    def test_single_block_formulas(self):
        gray = np.array([[1.0, 0.0], [0.0, 0.0]])
        approx, detail = cx.haar_level1(gray)
        assert approx[0, 0] == pytest.approx(0.5)
        assert detail.horizontal[0, 0] == pytest.approx(0.5)
        assert detail.vertical[0, 0] == pytest.approx(0.5)
        assert detail.diagonal[0, 0] == pytest.approx(0.5)

    def test_halves_dimensions(self):
        approx, detail = cx.haar_level1(np.zeros((256, 256)))
        assert approx.shape == (128, 128)
        assert detail.horizontal.shape == (128, 128)

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(17)
        gray = rng.uniform(0, 1, size=(10, 12))
        approx, detail = cx.haar_level1(gray)
        na, nh, nv, nd = naive_haar(gray)
        np.testing.assert_allclose(approx, na, rtol=1e-12)
        np.testing.assert_allclose(detail.horizontal, nh, rtol=1e-12)
        np.testing.assert_allclose(detail.vertical, nv, rtol=1e-12)
        np.testing.assert_allclose(detail.diagonal, nd, rtol=1e-12)

    def test_energy_preserved(self):
        rng = np.random.default_rng(18)
        gray = rng.uniform(0, 1, size=(64, 64))
        approx, detail = cx.haar_level1(gray)
        total = np.sum(approx ** 2) + np.sum(detail.stacked() ** 2)
        assert total == pytest.approx(np.sum(gray ** 2), rel=1e-4)

    def test_odd_dimension_raises(self):
        with pytest.raises(ShapeError):
            cx.haar_level1(np.zeros((5, 6)))
        with pytest.raises(ShapeError):
            cx.haar_level1(np.zeros((6, 5)))


class TestComplexityIndex:
    def test_constant_scores_zero(self):
        _, detail = cx.haar_level1(np.full((16, 16), 0.3))
        assert cx.complexity_index(detail) == 0

    def test_single_nonzero_coefficient(self):
        gray = np.zeros((8, 8))
        gray[0, 0] = 1.0  # exactly one 2x2 block is non-flat
        _, detail = cx.haar_level1(gray)
        # its three detail coefficients all normalize to 1.0
        assert cx.complexity_index(detail) == 3

    def test_checkerboard_and_halfplane_match_oracle(self):
        yy, xx = np.mgrid[0:8, 0:8]
        checker = ((yy + xx) % 2).astype(np.float64)
        halfplane = (xx >= 4).astype(np.float64)
        for gray in (checker, halfplane):
            _, detail = cx.haar_level1(gray)
            assert cx.complexity_index(detail) == naive_complexity(gray)

    def test_matches_oracle_on_random_images(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            gray = rng.uniform(0, 1, size=(12, 12))
            _, detail = cx.haar_level1(gray)
            assert cx.complexity_index(detail) == naive_complexity(gray), f"seed {seed}"

    def test_invariant_under_intensity_scaling(self):
        rng = np.random.default_rng(19)
        gray = rng.uniform(0, 1, size=(32, 32))
        _, detail = cx.haar_level1(gray)
        base = cx.complexity_index(detail)
        for factor in (0.5, 2.0):
            _, scaled = cx.haar_level1(gray * factor)
            assert cx.complexity_index(scaled) == base

    def test_monotone_over_synthetic_classes(self):
        c_noise = cx.score_image(noise_image())
        c_gradient = cx.score_image(gradient_image())
        c_constant = cx.score_image(constant_image())
        assert c_noise > c_gradient > c_constant == 0

    def test_bounded_by_coefficient_count(self):
        img = noise_image(side=64, seed=3)
        c = cx.score_image(img)
        assert 0 <= c <= 3 * 32 * 32


class TestPartitionGroups:
    def _scores(self, label, cs):
        return [cx.ComplexityScore(f"img{label}_{i:04d}", label, c) for i, c in enumerate(cs)]

    def test_groups_of_equal_size(self):
        rng = np.random.default_rng(20)
        scores = {0: self._scores(0, rng.integers(0, 1000, size=52).tolist())}
        groups = cx.partition_groups(scores, n_groups=4, per_group=13)
        assert len(groups) == 52
        counts = np.bincount(list(groups.values()))[1:]
        np.testing.assert_array_equal(counts, [13, 13, 13, 13])

    def test_sorted_by_complexity(self):
        scores = {0: self._scores(0, [900, 100, 500, 300, 700, 200, 600, 400])}
        groups = cx.partition_groups(scores, n_groups=4, per_group=2)
        by_id = {s.image_id: s.c for s in scores[0]}
        for img_id, grp in groups.items():
            for other_id, other_grp in groups.items():
                if grp < other_grp:
                    assert by_id[img_id] <= by_id[other_id]

    def test_ties_break_by_image_id(self):
        scores = {0: self._scores(0, [5, 5, 5, 5])}
        groups = cx.partition_groups(scores, n_groups=4, per_group=1)
        assert groups == {"img0_0000": 1, "img0_0001": 2, "img0_0002": 3, "img0_0003": 4}

    def test_trims_most_complex_extras(self):
        # 50 validation images -> keep the 48 simplest, drop the 2 most complex
        scores = {0: self._scores(0, list(range(50)))}
        groups = cx.partition_groups(scores, n_groups=4, per_group=12)
        assert len(groups) == 48
        assert "img0_0048" not in groups and "img0_0049" not in groups
        assert groups["img0_0000"] == 1 and groups["img0_0047"] == 4

    def test_every_kept_image_in_exactly_one_group(self):
        rng = np.random.default_rng(21)
        scores = {lbl: self._scores(lbl, rng.integers(0, 99, size=20).tolist())
                  for lbl in range(3)}
        groups = cx.partition_groups(scores, n_groups=4, per_group=5)
        ids = [f"img{lbl}_{i:04d}" for lbl in range(3) for i in range(20)]
        assert sorted(groups) == sorted(ids)
        assert set(groups.values()) == {1, 2, 3, 4}

    def test_insufficient_class_raises_with_name(self):
        scores = {7: self._scores(7, [1, 2, 3])}
        with pytest.raises(DatasetError, match="class 7"):
            cx.partition_groups(scores, n_groups=4, per_group=1)
