"""Box arithmetic and center-focus labeling against brute-force oracles."""
import numpy as np
import pytest

from lesiondet.geometry import (
    Annotation,
    AssignmentConfig,
    Box,
    box_center,
    centers_inside,
    cf_anchor_label,
    contains_point,
    iou,
    iou_matrix,
)

from conftest import random_box, random_int_box


def pixel_count_iou(a: Box, b: Box, grid: int = 64) -> float:
    """Independent oracle: count integer pixels inside each box (half-open)."""
    xs, ys = np.mgrid[0:grid, 0:grid]

    def member(box):
        return (xs >= box.x) & (xs < box.x + box.w) & (ys >= box.y) & (ys < box.y + box.h)

    in_a = member(a)
    in_b = member(b)
    union = np.logical_or(in_a, in_b).sum()
    return np.logical_and(in_a, in_b).sum() / union if union else 0.0


class TestIoU:
    def test_identical(self):
        assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 10, 10), Box(20, 20, 5, 5)) == 0.0

    def test_quarter_overlap(self):
        # 25 shared pixels of 175 in the union, by pixel counting
        expected = pixel_count_iou(Box(0, 0, 10, 10), Box(5, 5, 10, 10), grid=30)
        assert expected == pytest.approx(25 / 175)
        assert iou(Box(0, 0, 10, 10), Box(5, 5, 10, 10)) == pytest.approx(expected, abs=1e-12)

    def test_matches_pixel_oracle_on_integer_boxes(self, rng):
        for _ in range(300):
            a = random_int_box(rng)
            b = random_int_box(rng)
            assert iou(a, b) == pytest.approx(pixel_count_iou(a, b), abs=1e-9)

    def test_symmetric_bounded_and_reflexive(self, rng):
        for _ in range(500):
            a = random_box(rng)
            b = random_box(rng)
            v = iou(a, b)
            assert v == iou(b, a)
            assert 0.0 <= v <= 1.0
            assert iou(a, a) == 1.0

    def test_rejects_degenerate_boxes(self):
        with pytest.raises(ValueError):
            Box(0, 0, 0, 10)
        with pytest.raises(ValueError):
            Box(0, 0, 5, -1)
        with pytest.raises(ValueError):
            Box(np.inf, 0, 5, 5)

    def test_matrix_agrees_with_scalar(self, rng):
        boxes_a = [random_box(rng) for _ in range(40)]
        boxes_b = [random_box(rng) for _ in range(17)]
        m = iou_matrix(
            np.array([b.as_array() for b in boxes_a]),
            np.array([b.as_array() for b in boxes_b]),
        )
        for i, a in enumerate(boxes_a):
            for j, b in enumerate(boxes_b):
                assert m[i, j] == pytest.approx(iou(a, b), abs=1e-12)


class TestCenterAndContainment:
    @pytest.mark.parametrize(
        "box,expected",
        [
            (Box(0, 0, 10, 10), (5, 5)),
            (Box(10, 10, 4, 4), (12, 12)),
            (Box(3, 7, 1, 5), (3.5, 9.5)),
        ],
    )
    def test_center(self, box, expected):
        assert box_center(box) == expected

    def test_contains_interior(self):
        assert contains_point(Box(11, 11, 2, 2), (12, 12))

    def test_contains_exterior(self):
        assert not contains_point(Box(0, 0, 5, 5), (12, 12))

    def test_contains_boundary_inclusive(self):
        assert contains_point(Box(12, 12, 3, 3), (12, 12))
        assert contains_point(Box(12, 12, 3, 3), (15, 15))

    def test_centers_inside_matrix(self, rng):
        anchors = np.array([random_box(rng).as_array() for _ in range(30)])
        gts = np.array([random_box(rng).as_array() for _ in range(9)])
        m = centers_inside(anchors, gts)
        for i in range(30):
            for j in range(9):
                expect = contains_point(Box(*anchors[i]), box_center(Box(*gts[j])))
                assert m[i, j] == expect


def label_oracle(anchor: Box, gt: Box, cfg: AssignmentConfig) -> bool:
    """Straight transcription of the labeling rule, independent of vector code."""
    v = iou(anchor, gt)
    center_in = contains_point(anchor, box_center(gt))
    if cfg.cf_max_anchor_side > 0 and max(anchor.w, anchor.h) > cfg.cf_max_anchor_side:
        center_in = False
    if v >= cfg.positive_iou:
        return True
    return bool(cfg.cf_enabled and v > cfg.cf_iou_floor and center_in)


class TestCenterFocusLabel:
    def setup_method(self):
        self.cf = AssignmentConfig(cf_enabled=True)
        self.plain = AssignmentConfig(cf_enabled=False)

    def test_high_iou_positive_without_cf_clause(self):
        # the high-IoU clause needs no center test: positive even with the
        # center-focus clause disabled. (A pair with iou >= 0.5 and center
        # outside the anchor cannot exist: the intersection would have to
        # cover half the gt area while avoiding its midpoint.)
        gt = Box(0, 0, 10, 10)
        anchor = Box(0, 2, 10, 10)  # intersection 80, union 120
        v = iou(anchor, gt)
        assert v >= 0.5
        assert cf_anchor_label(anchor, gt, self.plain)
        assert cf_anchor_label(anchor, gt, self.cf)

    def test_high_iou_implies_center_contained(self, rng):
        # geometric fact backing the criterion-dominance property
        for _ in range(3000):
            a = random_box(rng)
            g = random_box(rng)
            if iou(a, g) >= 0.5:
                assert contains_point(a, box_center(g))

    def test_low_iou_center_inside_cf_positive(self):
        gt = Box(40, 40, 20, 20)
        anchor = Box(45, 45, 8, 8)
        v = iou(anchor, gt)
        assert 0.1 < v < 0.5
        assert contains_point(anchor, box_center(gt))
        assert cf_anchor_label(anchor, gt, self.cf)
        assert not cf_anchor_label(anchor, gt, self.plain)

    def test_below_floor_center_inside_negative(self):
        gt = Box(0, 0, 40, 40)
        anchor = Box(19, 19, 2, 2)  # covers the center, iou = 4/1600
        assert iou(anchor, gt) < 0.1
        assert contains_point(anchor, box_center(gt))
        assert not cf_anchor_label(anchor, gt, self.cf)

    def test_mid_iou_center_outside_negative(self):
        gt = Box(0, 0, 10, 10)
        anchor = Box(7, 7, 10, 10)  # iou = 9/191
        v = iou(anchor, gt)
        assert 0.0 < v < 0.5
        assert not contains_point(anchor, box_center(gt))
        assert not cf_anchor_label(anchor, gt, self.cf)

    def test_matches_oracle_randomized(self, rng):
        for _ in range(2000):
            anchor = random_box(rng)
            gt = random_box(rng)
            for cfg in (self.cf, self.plain):
                assert cf_anchor_label(anchor, gt, cfg) == label_oracle(anchor, gt, cfg)

    def test_cf_positives_superset_of_plain(self, rng):
        for _ in range(2000):
            anchor = random_box(rng)
            gt = random_box(rng)
            if cf_anchor_label(anchor, gt, self.plain):
                assert cf_anchor_label(anchor, gt, self.cf)

    def test_plain_rule_is_iou_threshold(self, rng):
        for _ in range(500):
            anchor = random_box(rng)
            gt = random_box(rng)
            assert cf_anchor_label(anchor, gt, self.plain) == (iou(anchor, gt) >= 0.5)

    def test_monotone_in_iou_for_fixed_center_status(self, rng):
        # concentric anchors keep the gt center covered; as IoU rises the
        # label must never flip positive -> negative
        for cfg in (self.cf, self.plain):
            for _ in range(100):
                gt = random_box(rng, lo=20, hi=80)
                cx, cy = box_center(gt)
                points = []
                for f in np.linspace(0.2, 3.0, 25):
                    w, h = gt.w * f, gt.h * f
                    anchor = Box(cx - w / 2, cy - h / 2, w, h)
                    points.append((iou(anchor, gt), cf_anchor_label(anchor, gt, cfg)))
                points.sort(key=lambda p: p[0])
                seen_positive = False
                for _, lab in points:
                    if seen_positive:
                        assert lab
                    seen_positive = seen_positive or lab

    def test_anchor_side_cap_limits_cf_clause(self):
        gt = Box(40, 40, 20, 20)
        anchor = Box(44, 44, 12, 12)  # covers center, iou = 144/400
        assert 0.1 < iou(anchor, gt) < 0.5
        capped = AssignmentConfig(cf_enabled=True, cf_max_anchor_side=10.0)
        uncapped = AssignmentConfig(cf_enabled=True)
        assert cf_anchor_label(anchor, gt, uncapped)
        assert not cf_anchor_label(anchor, gt, capped)
        # the cap never affects the high-IoU clause
        assert cf_anchor_label(gt, gt, capped)

    def test_loose_box_scenario(self):
        # a small anchor fitting the lesion at the center of a loose gt box:
        # rejected by the plain rule, accepted by center-focus
        gt = Box(100, 100, 30, 30)  # loose box, lesion occupies the middle
        lesion_anchor = Box(110, 110, 10, 10)
        v = iou(lesion_anchor, gt)
        assert 0.1 < v < 0.5
        assert contains_point(lesion_anchor, box_center(gt))
        assert not cf_anchor_label(lesion_anchor, gt, self.plain)
        assert cf_anchor_label(lesion_anchor, gt, self.cf)


class TestConfigValidation:
    def test_floor_must_be_below_positive(self):
        with pytest.raises(ValueError):
            AssignmentConfig(cf_iou_floor=0.5, positive_iou=0.5)

    def test_negative_cannot_exceed_positive(self):
        with pytest.raises(ValueError):
            AssignmentConfig(negative_iou=0.9, positive_iou=0.5)

    def test_annotation_category_domain(self):
        with pytest.raises(ValueError):
            Annotation(image_id="x", box=Box(0, 0, 1, 1), category=11)
