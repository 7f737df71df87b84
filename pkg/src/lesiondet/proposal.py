"""First detector stage: anchors, target assignment, proposals.

Anchor sides are fractions of a reference side (by default the input
image side), so the same 21-template set tiles every pyramid level; the
level only controls placement density. Target assignment labels an anchor
positive on plain IoU or, with center-focus enabled, when it covers the
ground-truth center above a small IoU floor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import AssignmentConfig, Annotation, Box, centers_inside, clip_box_array, iou_matrix
from .nn import Conv2d, Tensor, ops
from .pyramid import FeatureMapSpec

# guards exp() in decode against wild regression outputs
DELTA_CLIP = float(np.log(1000.0 / 16.0))


@dataclass(frozen=True)
class AnchorConfig:
    scales: tuple[float, ...] = (0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    # anchor side = scale * reference_side; None tracks the input image side
    reference_side: float | None = None

    def __post_init__(self):
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("scales and aspect ratios must be positive")

    @property
    def anchors_per_location(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    def template_sizes(self, reference_side: float) -> np.ndarray:
        """(A,2) anchor widths/heights: w = s*ref*sqrt(r), h = s*ref/sqrt(r)."""
        sizes = np.empty((self.anchors_per_location, 2), dtype=np.float64)
        i = 0
        for s in self.scales:
            side = s * reference_side
            for r in self.aspect_ratios:
                rt = np.sqrt(r)
                sizes[i, 0] = side * rt
                sizes[i, 1] = side / rt
                i += 1
        return sizes


@dataclass(frozen=True)
class Anchor:
    box: Box
    level: int
    cell: tuple[int, int]  # (row, col)
    template: tuple[int, int]  # (scale index, ratio index)


class AnchorGrid:
    """All anchors of one pyramid level, stored as arrays.

    Anchor order is row-major over cells with templates innermost, matching
    the (H, W, A) flattening of the head outputs. Boxes materialize lazily
    so shape-only checks at large input sizes stay cheap.
    """

    def __init__(self, level_spec: FeatureMapSpec, cfg: AnchorConfig):
        self.level = level_spec.level
        self.stride = level_spec.stride
        self.height = level_spec.height
        self.width = level_spec.width
        self.cfg = cfg
        ref = cfg.reference_side
        if ref is None:
            ref = float(level_spec.stride * max(level_spec.height, level_spec.width))
        self.reference_side = ref
        self.templates = cfg.template_sizes(ref)
        self._boxes: np.ndarray | None = None

    def __len__(self) -> int:
        return self.height * self.width * self.templates.shape[0]

    @property
    def boxes(self) -> np.ndarray:
        """(N,4) x,y,w,h; centers at cell centers in image coordinates."""
        if self._boxes is None:
            a = self.templates.shape[0]
            cy = (np.arange(self.height, dtype=np.float64) + 0.5) * self.stride
            cx = (np.arange(self.width, dtype=np.float64) + 0.5) * self.stride
            wh = np.broadcast_to(self.templates, (self.height, self.width, a, 2))
            centers = np.empty((self.height, self.width, a, 2), dtype=np.float64)
            centers[..., 0] = cx[None, :, None]
            centers[..., 1] = cy[:, None, None]
            boxes = np.concatenate([centers - wh / 2.0, wh.copy()], axis=-1)
            self._boxes = boxes.reshape(-1, 4)
        return self._boxes

    def __getitem__(self, i: int) -> Anchor:
        n = len(self)
        if not 0 <= i < n:
            raise IndexError(i)
        a = self.templates.shape[0]
        cell_idx, t = divmod(i, a)
        row, col = divmod(cell_idx, self.width)
        b = self.boxes[i]
        n_ratios = len(self.cfg.aspect_ratios)
        return Anchor(
            box=Box(*b),
            level=self.level,
            cell=(row, col),
            template=(t // n_ratios, t % n_ratios),
        )


def generate_anchor_grid(level: FeatureMapSpec, cfg: AnchorConfig) -> AnchorGrid:
    return AnchorGrid(level, cfg)


def stack_anchor_boxes(grids: list[AnchorGrid]) -> tuple[np.ndarray, list[slice]]:
    """Concatenate per-level boxes; returns (boxes, per-grid slices)."""
    sizes = [len(g) for g in grids]
    offsets = np.cumsum([0] + sizes)
    boxes = np.concatenate([g.boxes for g in grids], axis=0) if grids else np.zeros((0, 4))
    slices = [slice(int(lo), int(hi)) for lo, hi in zip(offsets[:-1], offsets[1:])]
    return boxes, slices


def anchors_in_image(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    return (
        (boxes[:, 0] >= 0)
        & (boxes[:, 1] >= 0)
        & (boxes[:, 0] + boxes[:, 2] <= width)
        & (boxes[:, 1] + boxes[:, 3] <= height)
    )


@dataclass(frozen=True)
class SamplingConfig:
    batch: int = 256
    positive_fraction: float = 0.5


@dataclass
class RPNTargets:
    """Labels: 1 positive, 0 negative, -1 unsampled/excluded.

    positive_indices, matched_gt and regression_targets are aligned with
    each other and cover every positive anchor (pre- or post-sampling,
    depending on whether a SamplingConfig was applied).
    """

    labels: np.ndarray
    positive_indices: np.ndarray
    matched_gt: np.ndarray
    regression_targets: np.ndarray
    max_iou: np.ndarray
    sampled: bool = False

    @property
    def n_anchors(self) -> int:
        return self.labels.shape[0]


def encode_deltas_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    acx = anchors[:, 0] + anchors[:, 2] / 2.0
    acy = anchors[:, 1] + anchors[:, 3] / 2.0
    gcx = gts[:, 0] + gts[:, 2] / 2.0
    gcy = gts[:, 1] + gts[:, 3] / 2.0
    out = np.empty_like(anchors, dtype=np.float64)
    out[:, 0] = (gcx - acx) / anchors[:, 2]
    out[:, 1] = (gcy - acy) / anchors[:, 3]
    out[:, 2] = np.log(gts[:, 2] / anchors[:, 2])
    out[:, 3] = np.log(gts[:, 3] / anchors[:, 3])
    return out


def decode_deltas_array(anchors: np.ndarray, deltas: np.ndarray,
                        clamp: bool = False) -> np.ndarray:
    """Inverse of encode; exact round trip when clamp is off."""
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite regression deltas")
    dw = deltas[:, 2]
    dh = deltas[:, 3]
    if clamp:
        dw = np.minimum(dw, DELTA_CLIP)
        dh = np.minimum(dh, DELTA_CLIP)
    cx = anchors[:, 0] + anchors[:, 2] / 2.0 + deltas[:, 0] * anchors[:, 2]
    cy = anchors[:, 1] + anchors[:, 3] / 2.0 + deltas[:, 1] * anchors[:, 3]
    w = anchors[:, 2] * np.exp(dw)
    h = anchors[:, 3] * np.exp(dh)
    return np.stack([cx - w / 2.0, cy - h / 2.0, w, h], axis=1)


def encode_deltas(anchor: Box, gt: Box) -> tuple[float, float, float, float]:
    d = encode_deltas_array(anchor.as_array()[None], gt.as_array()[None])[0]
    return tuple(float(v) for v in d)


def decode_deltas(anchor: Box, d) -> Box:
    out = decode_deltas_array(anchor.as_array()[None], np.asarray(d, dtype=np.float64)[None])[0]
    return Box(*out)


def assign_targets(
    anchors,
    gts: list[Annotation],
    acfg: AssignmentConfig,
    image_size: tuple[int, int],
    sampling: SamplingConfig | None = None,
    rng: np.random.Generator | None = None,
) -> RPNTargets:
    """Label anchors against ground truth.

    anchors: (N,4) array, AnchorGrid, or list of AnchorGrid.
    image_size: (width, height); boundary-crossing anchors are excluded.
    With a SamplingConfig, labels are additionally thinned to a minibatch.
    """
    boxes = _as_anchor_boxes(anchors)
    n = boxes.shape[0]
    width, height = image_size
    in_image = anchors_in_image(boxes, width, height)
    labels = np.full(n, -1, dtype=np.int8)

    if len(gts) == 0:
        labels[in_image] = 0
        return RPNTargets(
            labels=labels,
            positive_indices=np.zeros(0, dtype=np.int64),
            matched_gt=np.zeros(0, dtype=np.int64),
            regression_targets=np.zeros((0, 4), dtype=np.float64),
            max_iou=np.zeros(n, dtype=np.float64),
            sampled=sampling is not None,
        )

    gt_boxes = np.stack([ann.box.as_array() for ann in gts])
    ious = iou_matrix(boxes, gt_boxes)
    ious[~in_image] = 0.0
    inside = centers_inside(boxes, gt_boxes)

    pair_pos = ious >= acfg.positive_iou
    if acfg.cf_enabled:
        cf = (ious > acfg.cf_iou_floor) & inside
        if acfg.cf_max_anchor_side > 0:
            small = np.maximum(boxes[:, 2], boxes[:, 3]) <= acfg.cf_max_anchor_side
            cf &= small[:, None]
        pair_pos |= cf
    if acfg.keep_argmax_positive:
        gt_best = ious.max(axis=0)
        pair_pos |= (ious == gt_best[None, :]) & (gt_best[None, :] > 0)
    pair_pos &= in_image[:, None]

    anchor_pos = pair_pos.any(axis=1)
    max_iou = ious.max(axis=1)
    labels[in_image & ~anchor_pos & (max_iou < acfg.negative_iou)] = 0
    labels[anchor_pos] = 1

    positive_indices = np.flatnonzero(anchor_pos).astype(np.int64)
    cand_iou = np.where(pair_pos[positive_indices], ious[positive_indices], -1.0)
    matched = cand_iou.argmax(axis=1).astype(np.int64)
    reg = encode_deltas_array(boxes[positive_indices], gt_boxes[matched])

    targets = RPNTargets(
        labels=labels,
        positive_indices=positive_indices,
        matched_gt=matched,
        regression_targets=reg,
        max_iou=max_iou,
    )
    if sampling is not None:
        targets = sample_rpn_minibatch(targets, sampling, rng or np.random.default_rng(0))
    return targets


def sample_rpn_minibatch(targets: RPNTargets, sampling: SamplingConfig,
                         rng: np.random.Generator) -> RPNTargets:
    """Thin raw labels to a fixed-size minibatch with a positive cap."""
    pos = targets.positive_indices
    neg = np.flatnonzero(targets.labels == 0)
    n_pos = min(len(pos), int(sampling.batch * sampling.positive_fraction))
    if len(pos) > n_pos:
        keep_pos = rng.choice(len(pos), size=n_pos, replace=False)
        keep_pos.sort()
    else:
        keep_pos = np.arange(len(pos))
    n_neg = min(len(neg), sampling.batch - n_pos)
    chosen_neg = rng.choice(neg, size=n_neg, replace=False) if len(neg) > n_neg else neg

    labels = np.full_like(targets.labels, -1)
    labels[pos[keep_pos]] = 1
    labels[chosen_neg] = 0
    return RPNTargets(
        labels=labels,
        positive_indices=pos[keep_pos],
        matched_gt=targets.matched_gt[keep_pos],
        regression_targets=targets.regression_targets[keep_pos],
        max_iou=targets.max_iou,
        sampled=True,
    )


def _as_anchor_boxes(anchors) -> np.ndarray:
    if isinstance(anchors, AnchorGrid):
        return anchors.boxes
    if isinstance(anchors, (list, tuple)):
        return stack_anchor_boxes(list(anchors))[0]
    return np.asarray(anchors, dtype=np.float64)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy descending-score suppression; ties keep the lower input index.

    Returns kept indices in visit order; surviving pairs all have IoU
    below the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms requires finite scores")
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    return kernels.active().nms_keep(boxes, order, float(iou_threshold))


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float
    level: int


@dataclass(frozen=True)
class ProposalConfig:
    pre_nms_per_level: int = 1000
    post_nms_total: int = 300
    nms_threshold: float = 0.7
    min_size: float = 1.0


class RPNHead:
    """Shared 3x3 conv trunk with 1x1 objectness / regression heads.

    Outputs are flattened to match anchor order: row-major cells,
    templates innermost.
    """

    def __init__(self, channels: int, anchors_per_location: int, rng=None):
        rng = rng or np.random.default_rng(0)
        self.a = anchors_per_location
        self.trunk = Conv2d(channels, channels, 3, pad=1, rng=rng)
        self.obj = Conv2d(channels, anchors_per_location, 1, rng=rng, init_std=0.01)
        self.reg = Conv2d(channels, 4 * anchors_per_location, 1, rng=rng, init_std=0.01)

    def __call__(self, level_map: Tensor) -> tuple[Tensor, Tensor]:
        t = ops.relu(self.trunk(level_map))
        a = self.a
        _, h, w = t.data.shape
        obj = ops.reshape(ops.transpose(self.obj(t), (1, 2, 0)), (h * w * a,))
        reg = self.reg(t)  # (4A, H, W), channel = template*4 + component
        reg = ops.reshape(reg, (a, 4, h, w))
        reg = ops.reshape(ops.transpose(reg, (2, 3, 0, 1)), (h * w * a, 4))
        return obj, reg

    def params(self):
        return {"trunk": self.trunk, "obj": self.obj, "reg": self.reg}


def propose_arrays(
    grids: list[AnchorGrid],
    objectness: list[np.ndarray],
    deltas: list[np.ndarray],
    image_size: tuple[int, int],
    cfg: ProposalConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode per-level head outputs into proposals.

    Returns (boxes (N,4), scores (N,), levels (N,)) after per-level top-k,
    clipping, cross-level NMS and the global post-NMS budget.
    """
    width, height = image_size
    all_boxes, all_scores, all_levels = [], [], []
    for grid, obj, reg in zip(grids, objectness, deltas):
        scores = ops.sigmoid(np.asarray(obj, dtype=np.float64))
        k = min(cfg.pre_nms_per_level, scores.shape[0])
        top = np.argsort(-scores, kind="stable")[:k]
        boxes = decode_deltas_array(grid.boxes[top], np.asarray(reg, dtype=np.float64)[top],
                                    clamp=True)
        boxes = clip_box_array(boxes, width, height)
        ok = (boxes[:, 2] >= cfg.min_size) & (boxes[:, 3] >= cfg.min_size)
        all_boxes.append(boxes[ok])
        all_scores.append(scores[top][ok])
        all_levels.append(np.full(int(ok.sum()), grid.level, dtype=np.int64))
    boxes = np.concatenate(all_boxes, axis=0)
    scores = np.concatenate(all_scores, axis=0)
    levels = np.concatenate(all_levels, axis=0)
    keep = nms(boxes, scores, cfg.nms_threshold)[: cfg.post_nms_total]
    return boxes[keep], scores[keep], levels[keep]


def propose(
    grids: list[AnchorGrid],
    objectness: list[np.ndarray],
    deltas: list[np.ndarray],
    image_size: tuple[int, int],
    cfg: ProposalConfig = ProposalConfig(),
) -> list[Proposal]:
    boxes, scores, levels = propose_arrays(grids, objectness, deltas, image_size, cfg)
    return [
        Proposal(box=Box(*b), objectness=float(s), level=int(lvl))
        for b, s, lvl in zip(boxes, scores, levels)
    ]
