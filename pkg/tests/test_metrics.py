import math

import numpy as np
import pytest

from mhmamba.metrics import (REGIONS, average_reports, boundary, dice_score, evaluate, hausdorff,
                             hd95, regions_from_labels)
from oracles import exhaustive_hd95


def random_mask(rng, shape, p):
    m = rng.random(shape) < p
    if not m.any():
        m[tuple(rng.integers(0, s) for s in shape)] = True
    return m


class TestDice:
    def test_identical(self):
        m = np.zeros((4, 4, 4), bool)
        m[1:3, 1:3, 1:3] = True
        assert dice_score(m, m) == 100.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0, 0, 0] = b[3, 3, 3] = True
        assert dice_score(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0:2, 0:2, 0:2] = True
        b[1:3, 0:2, 0:2] = True
        assert a.sum() == b.sum() == 8 and (a & b).sum() == 4
        assert dice_score(a, b) == 50.0

    def test_both_empty(self):
        z = np.zeros((2, 2, 2), bool)
        assert dice_score(z, z) == 100.0

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((5, 5, 5)) < 0.3, rng.random((5, 5, 5)) < 0.4
        assert dice_score(a, b) == dice_score(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestHD95:
    def test_identical(self):
        m = np.zeros((5, 5, 5), bool)
        m[1:4, 2:4, 1:3] = True
        assert hd95(m, m) == 0.0

    def test_single_voxel_displacement(self):
        a = np.zeros((5, 5, 5), bool)
        b = np.zeros((5, 5, 5), bool)
        a[0, 0, 0] = True
        b[3, 0, 0] = True
        assert hd95(a, b) == 3.0

    def test_spacing_scales(self):
        a = np.zeros((5, 5, 5), bool)
        b = np.zeros((5, 5, 5), bool)
        a[0, 0, 0] = True
        b[0, 0, 2] = True
        assert hd95(a, b, spacing=(1.0, 1.0, 2.5)) == 5.0

    def test_empty_is_undefined(self):
        a = np.zeros((3, 3, 3), bool)
        b = a.copy()
        b[1, 1, 1] = True
        assert math.isnan(hd95(a, b)) and math.isnan(hd95(b, a))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(int(s) for s in rng.integers(2, 9, 3))
        a, b = random_mask(rng, shape, 0.3), random_mask(rng, shape, 0.25)
        expected, pooled = exhaustive_hd95(a, b)
        assert hd95(a, b) == expected
        assert hausdorff(a, b) == pooled.max()
        assert hd95(a, b) <= hausdorff(a, b)

    def test_anisotropic_oracle(self):
        rng = np.random.default_rng(99)
        a, b = random_mask(rng, (6, 5, 7), 0.4), random_mask(rng, (6, 5, 7), 0.2)
        sp = (1.0, 0.5, 2.0)
        expected, _ = exhaustive_hd95(a, b, sp)
        assert hd95(a, b, sp) == pytest.approx(expected, rel=1e-15, abs=0)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = random_mask(rng, (6, 6, 6), 0.3), random_mask(rng, (6, 6, 6), 0.3)
        assert hd95(a, b) == hd95(b, a)

    def test_boundary_of_cube(self):
        m = np.zeros((5, 5, 5), bool)
        m[1:4, 1:4, 1:4] = True
        b = boundary(m)
        assert b.sum() == 27 - 1 and not b[2, 2, 2]


class TestRegions:
    def test_all_zero(self):
        regions = regions_from_labels(np.zeros((2, 2, 2), np.uint8))
        assert all(not m.any() for m in regions.values())

    def test_enhancing_voxel_in_every_region(self):
        lab = np.zeros((2, 2, 2), np.uint8)
        lab[1, 0, 1] = 3
        regions = regions_from_labels(lab)
        assert all(m[1, 0, 1] and m.sum() == 1 for m in regions.values())

    def test_nesting_property(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            r = regions_from_labels(rng.integers(0, 4, (6, 5, 4)))
            assert np.all(r["WT"] >= r["TC"]) and np.all(r["TC"] >= r["ET"])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            regions_from_labels(np.array([[[4]]]))


class TestReport:
    def test_perfect_prediction(self):
        lab = np.random.default_rng(1).integers(0, 4, (6, 6, 6))
        rep = evaluate(lab, lab)
        assert all(rep.dice[r] == 100.0 and rep.hd95[r] == 0.0 for r in REGIONS)
        assert rep.rows() == ["region,dice,hd95", "WT,100.0000,0.0000", "TC,100.0000,0.0000",
                              "ET,100.0000,0.0000", "Avg,100.0000,0.0000"]

    def test_undefined_excluded_from_average(self):
        gt = np.zeros((4, 4, 4), np.uint8)
        gt[1, 1, 1] = 1
        rep = evaluate(gt, gt)
        assert math.isnan(rep.hd95["ET"]) and rep.mean_hd95 == 0.0
        assert "ET,100.0000,undefined" in rep.to_csv()

    def test_average_reports(self):
        a = np.zeros((4, 4, 4), np.uint8)
        a[0:2, 0:2, 0:2] = 3
        b = np.zeros((4, 4, 4), np.uint8)
        b[1:3, 0:2, 0:2] = 3
        avg = average_reports([evaluate(a, a), evaluate(b, a)])
        assert avg.dice["ET"] == 75.0
