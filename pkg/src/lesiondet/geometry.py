"""Box arithmetic and the center-focus anchor labeling rule.

Boxes are continuous x,y,w,h in pixel coordinates with the origin at the
image top-left; area is w*h with no pixel (+1) convention. Everything here
is pure and immutable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

CATEGORIES = (1, 2, 3, 4)
CATEGORY_NAMES = {
    1: "blot_hemorrhage",
    2: "micro_aneurysm",
    3: "hard_exudate",
    4: "cotton_wool_spot",
}


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extent must be positive, got w={self.w}, h={self.h}")
        if not all(np.isfinite(v) for v in (self.x, self.y, self.x + self.w, self.y + self.h)):
            raise ValueError("box coordinates must be finite")

    @property
    def right(self) -> float:
        return self.x + self.w

    @property
    def bottom(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class Annotation:
    """One ground-truth lesion instance on an image."""

    image_id: str
    box: Box
    category: int

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"category must be in {CATEGORIES}, got {self.category}")


@dataclass(frozen=True)
class AssignmentConfig:
    """Thresholds for anchor labeling.

    An anchor is positive when its IoU with a ground-truth box reaches
    positive_iou, or (when center-focus is enabled) when it contains the
    ground-truth center and its IoU exceeds cf_iou_floor.
    """

    cf_enabled: bool = True
    cf_iou_floor: float = 0.1
    positive_iou: float = 0.5
    negative_iou: float = 0.5
    keep_argmax_positive: bool = True
    # optional cap: apply the center-focus clause only to anchors whose
    # longer side is at most this many pixels (0 disables the cap)
    cf_max_anchor_side: float = 0.0

    def __post_init__(self):
        if not (0 <= self.cf_iou_floor < self.positive_iou <= 1):
            raise ValueError(
                f"need 0 <= cf_iou_floor < positive_iou <= 1, got "
                f"{self.cf_iou_floor}, {self.positive_iou}"
            )
        if self.negative_iou > self.positive_iou:
            raise ValueError("negative_iou must not exceed positive_iou")


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; symmetric, in [0, 1].

    Areas come from the same edge differences as the intersection so that
    iou(a, a) is exactly 1 despite float rounding.
    """
    ar, ab = a.x + a.w, a.y + a.h
    br, bb = b.x + b.w, b.y + b.h
    iw = min(ar, br) - max(a.x, b.x)
    if iw <= 0:
        return 0.0
    ih = min(ab, bb) - max(a.y, b.y)
    if ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ar - a.x) * (ab - a.y)
    area_b = (br - b.x) * (bb - b.y)
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for (N,4) x (M,4) x,y,w,h arrays via the kernel backend."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return kernels.active().pairwise_iou(a, b)


def box_center(b: Box) -> tuple[float, float]:
    return (b.x + b.w / 2.0, b.y + b.h / 2.0)


def contains_point(b: Box, p: tuple[float, float]) -> bool:
    """Boundary-inclusive point membership."""
    px, py = p
    return b.x <= px <= b.right and b.y <= py <= b.bottom


def cf_anchor_label(anchor: Box, gt: Box, cfg: AssignmentConfig) -> bool:
    """True when the anchor is labeled positive for this ground truth.

    Positive iff IoU >= positive_iou, or center-focus is on, the anchor
    contains the ground-truth center and IoU exceeds the floor. The
    high-IoU clause wins over the low-IoU-negative case.
    """
    v = iou(anchor, gt)
    if v >= cfg.positive_iou:
        return True
    if cfg.cf_enabled and v > cfg.cf_iou_floor and contains_point(anchor, box_center(gt)):
        if cfg.cf_max_anchor_side > 0 and max(anchor.w, anchor.h) > cfg.cf_max_anchor_side:
            return False
        return True
    return False


def centers_inside(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """(N,M) bool: ground-truth center of gts[m] inside anchors[n] (inclusive)."""
    cx = gts[:, 0] + gts[:, 2] / 2.0
    cy = gts[:, 1] + gts[:, 3] / 2.0
    x1, y1 = anchors[:, 0][:, None], anchors[:, 1][:, None]
    x2 = (anchors[:, 0] + anchors[:, 2])[:, None]
    y2 = (anchors[:, 1] + anchors[:, 3])[:, None]
    return (cx[None, :] >= x1) & (cx[None, :] <= x2) & (cy[None, :] >= y1) & (cy[None, :] <= y2)


def clip_box_array(boxes: np.ndarray, width: float, height: float, min_size: float = 1e-3) -> np.ndarray:
    """Clip (N,4) x,y,w,h boxes to image bounds, flooring extents at min_size."""
    x1 = np.clip(boxes[:, 0], 0, width - min_size)
    y1 = np.clip(boxes[:, 1], 0, height - min_size)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2], min_size, width)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3], min_size, height)
    out = np.stack([x1, y1, np.maximum(x2 - x1, min_size), np.maximum(y2 - y1, min_size)], axis=1)
    return out
