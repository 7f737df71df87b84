"""Detector assembly: backbone + pyramid + RPN + RoI head, with losses.

Gradients flow through feature maps and heads; proposal boxes are decoded
outside the tape (standard two-stage treatment).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Annotation, AssignmentConfig, iou_matrix, centers_inside
from .head import (
    Detection,
    HeadConfig,
    RoIHead,
    decode_detections,
    roi_align_tensor,
    select_pool_levels_array,
)
from .nn import Tensor, flatten_params, ops
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .proposal import (
    AnchorConfig,
    AnchorGrid,
    ProposalConfig,
    RPNHead,
    SamplingConfig,
    assign_targets,
    encode_deltas_array,
    generate_anchor_grid,
    propose_arrays,
    sample_rpn_minibatch,
)
from .pyramid import (
    BackboneSpec,
    FeaturePyramid,
    PyramidConfig,
    TinyBackbone,
    proposal_levels,
    pyramid_shapes,
)


@dataclass(frozen=True)
class RoISamplerConfig:
    batch: int = 128
    positive_fraction: float = 0.25
    fg_iou: float = 0.5
    # extend the center-focus rule to second-stage sampling (off: plain IoU)
    cf_enabled: bool = False
    cf_iou_floor: float = 0.1


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    assignment: AssignmentConfig = field(default_factory=AssignmentConfig)
    rpn_sampling: SamplingConfig = field(default_factory=SamplingConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    rois: RoISamplerConfig = field(default_factory=RoISamplerConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(
            backbone=BackboneSpec(tuple(d["backbone"]["stage_channels"]),
                                  tuple(d["backbone"]["stage_blocks"])),
            pyramid=PyramidConfig(**d["pyramid"]),
            anchors=AnchorConfig(
                scales=tuple(d["anchors"]["scales"]),
                aspect_ratios=tuple(d["anchors"]["aspect_ratios"]),
                reference_side=d["anchors"]["reference_side"],
            ),
            assignment=AssignmentConfig(**d["assignment"]),
            rpn_sampling=SamplingConfig(**d["rpn_sampling"]),
            proposals=ProposalConfig(**d["proposals"]),
            rois=RoISamplerConfig(**d["rois"]),
            head=HeadConfig(**d["head"]),
        )


class Detector:
    def __init__(self, cfg: DetectorConfig, seed: int = 0):
        rng = np.random.default_rng([int(seed), 101])
        self.cfg = cfg
        self.backbone = TinyBackbone(cfg.backbone, rng)
        self.pyramid = FeaturePyramid(cfg.backbone, cfg.pyramid, rng)
        self.rpn = RPNHead(cfg.pyramid.channels, cfg.anchors.anchors_per_location, rng)
        self.roi_head = RoIHead(cfg.pyramid.channels, cfg.head, rng)
        self._anchor_cache: dict[tuple[int, int], list[AnchorGrid]] = {}

    # ---- parameters ----

    def named_params(self) -> dict[str, Tensor]:
        return flatten_params(
            {
                "backbone": self.backbone,
                "pyramid": self.pyramid,
                "rpn": self.rpn,
                "roi_head": self.roi_head,
            }
        )

    def astype(self, dtype) -> "Detector":
        for p in self.named_params().values():
            p.data = p.data.astype(dtype)
        return self

    # ---- anchors ----

    def anchor_grids(self, image_size: tuple[int, int]) -> list[AnchorGrid]:
        key = (int(image_size[0]), int(image_size[1]))
        if key not in self._anchor_cache:
            w, h = key
            shapes = {s.level: s for s in pyramid_shapes((h, w), self.cfg.pyramid)}
            grids = [
                generate_anchor_grid(shapes[lvl], self.cfg.anchors)
                for lvl in proposal_levels(self.cfg.pyramid.mode)
            ]
            self._anchor_cache[key] = grids
        return self._anchor_cache[key]

    # ---- forward pieces ----

    def feature_levels(self, image: Tensor) -> dict[int, Tensor]:
        return self.pyramid(image, self.backbone(image))

    def rpn_outputs(self, levels: dict[int, Tensor]) -> tuple[list[Tensor], list[Tensor]]:
        obj_list, reg_list = [], []
        for lvl in proposal_levels(self.cfg.pyramid.mode):
            obj, reg = self.rpn(levels[lvl])
            obj_list.append(obj)
            reg_list.append(reg)
        return obj_list, reg_list

    def _pool(self, levels: dict[int, Tensor], roi_boxes: np.ndarray) -> Tensor:
        mode = self.cfg.pyramid.mode
        lvl_ids = select_pool_levels_array(roi_boxes, mode)
        pool, samp = self.cfg.head.pool_size, self.cfg.head.sampling
        groups = []
        order = []
        for lvl in np.unique(lvl_ids):
            idx = np.flatnonzero(lvl_ids == lvl)
            pooled = roi_align_tensor(
                levels[int(lvl)], roi_boxes[idx], pool, 1.0 / (2 ** int(lvl)), samp
            )
            groups.append(pooled)
            order.append(idx)
        cat = ops.concat0(groups) if len(groups) > 1 else groups[0]
        perm = np.concatenate(order)
        if np.array_equal(perm, np.arange(len(perm))):
            return cat
        return ops.take_rows(cat, np.argsort(perm))

    # ---- training forward ----

    def forward_train(
        self,
        image: np.ndarray,
        annotations: list[Annotation],
        rng: np.random.Generator,
        raw_targets=None,
        fixed_rois: np.ndarray | None = None,
    ) -> dict:
        """One image forward pass returning loss tensors and diagnostics.

        image: (3,H,W) float in [0,1]. raw_targets lets the caller reuse a
        cached unsampled assignment; fixed_rois bypasses proposal-driven
        RoI sampling (used by gradient checks).
        """
        img_t = Tensor(image)
        h, w = image.shape[1:]
        image_size = (w, h)
        levels = self.feature_levels(img_t)
        obj_list, reg_list = self.rpn_outputs(levels)
        grids = self.anchor_grids(image_size)

        if raw_targets is None:
            raw_targets = assign_targets(grids, annotations, self.cfg.assignment, image_size)
        targets = sample_rpn_minibatch(raw_targets, self.cfg.rpn_sampling, rng)

        obj_cat = ops.concat0(obj_list) if len(obj_list) > 1 else obj_list[0]
        reg_cat = ops.concat0(reg_list) if len(reg_list) > 1 else reg_list[0]
        sampled_idx = np.flatnonzero(targets.labels >= 0)
        rpn_cls = ops.bce_with_logits_mean(
            ops.take_rows(obj_cat, sampled_idx), targets.labels[sampled_idx]
        )
        rpn_reg = ops.smooth_l1_mean(
            ops.take_rows(reg_cat, targets.positive_indices), targets.regression_targets
        )

        if fixed_rois is not None:
            roi_boxes = np.asarray(fixed_rois, dtype=np.float64)
        else:
            prop_boxes, _, _ = propose_arrays(
                grids,
                [o.data for o in obj_list],
                [r.data for r in reg_list],
                image_size,
                self.cfg.proposals,
            )
            roi_boxes = prop_boxes
        roi_boxes, roi_labels, pos_rows, roi_reg = sample_rois(
            roi_boxes, annotations, self.cfg.rois, rng
        )

        if roi_boxes.shape[0] == 0:
            head_cls = ops.zero_scalar(obj_cat.data.dtype)
            head_reg = ops.zero_scalar(obj_cat.data.dtype)
        else:
            pooled = self._pool(levels, roi_boxes)
            cls_logits, deltas = self.roi_head(pooled)
            head_cls = ops.softmax_cross_entropy_mean(cls_logits, roi_labels)
            if pos_rows.size:
                flat = ops.reshape(deltas, (deltas.data.shape[0] * 4, 4))
                take = pos_rows * 4 + (roi_labels[pos_rows] - 1)
                head_reg = ops.smooth_l1_mean(ops.take_rows(flat, take), roi_reg)
            else:
                head_reg = ops.zero_scalar(cls_logits.data.dtype)

        total = ops.add_n([rpn_cls, rpn_reg, head_cls, head_reg])
        return {
            "rpn_cls": rpn_cls,
            "rpn_reg": rpn_reg,
            "head_cls": head_cls,
            "head_reg": head_reg,
            "total": total,
            "n_rpn_pos": int(targets.positive_indices.size),
            "n_roi_pos": int(pos_rows.size),
            "n_rois": int(roi_boxes.shape[0]),
        }

    # ---- inference ----

    def forward_infer(self, image: np.ndarray) -> list[Detection]:
        img_t = Tensor(image)
        h, w = image.shape[1:]
        image_size = (w, h)
        levels = self.feature_levels(img_t)
        obj_list, reg_list = self.rpn_outputs(levels)
        boxes, _, _ = propose_arrays(
            self.anchor_grids(image_size),
            [o.data for o in obj_list],
            [r.data for r in reg_list],
            image_size,
            self.cfg.proposals,
        )
        if boxes.shape[0] == 0:
            return []
        pooled = self._pool(levels, boxes)
        cls_logits, deltas = self.roi_head(pooled)
        probs = ops.softmax(cls_logits.data, axis=1)
        return decode_detections(boxes, probs, deltas.data, self.cfg.head, image_size)


def sample_rois(
    proposal_boxes: np.ndarray,
    annotations: list[Annotation],
    cfg: RoISamplerConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pick the second-stage training batch from proposals plus gt boxes.

    Returns (roi_boxes, labels (0=background, else category), positive row
    indices, regression targets for those rows).
    """
    if annotations:
        gt_boxes = np.stack([a.box.as_array() for a in annotations])
        gt_cats = np.array([a.category for a in annotations], dtype=np.int64)
        boxes = np.concatenate([proposal_boxes, gt_boxes], axis=0)
    else:
        boxes = proposal_boxes
    if boxes.shape[0] == 0:
        return (np.zeros((0, 4)), np.zeros(0, np.int64), np.zeros(0, np.int64),
                np.zeros((0, 4)))

    if annotations:
        ious = iou_matrix(boxes, gt_boxes)
        max_iou = ious.max(axis=1)
        argmax = ious.argmax(axis=1)
        fg = max_iou >= cfg.fg_iou
        if cfg.cf_enabled:
            inside = centers_inside(boxes, gt_boxes)
            cf = (ious > cfg.cf_iou_floor) & inside
            fg |= cf.any(axis=1)
            # re-match center-focus rois to their best qualifying gt
            cand = np.where(cf | (ious >= cfg.fg_iou), ious, -1.0)
            argmax = np.where(fg, cand.argmax(axis=1), argmax)
    else:
        fg = np.zeros(boxes.shape[0], dtype=bool)
        argmax = np.zeros(boxes.shape[0], dtype=np.int64)

    fg_idx = np.flatnonzero(fg)
    bg_idx = np.flatnonzero(~fg)
    n_fg = min(fg_idx.size, int(round(cfg.batch * cfg.positive_fraction)))
    if fg_idx.size > n_fg:
        fg_idx = np.sort(rng.choice(fg_idx, size=n_fg, replace=False))
    n_bg = min(bg_idx.size, cfg.batch - fg_idx.size)
    if bg_idx.size > n_bg:
        bg_idx = np.sort(rng.choice(bg_idx, size=n_bg, replace=False))

    chosen = np.concatenate([fg_idx, bg_idx])
    roi_boxes = boxes[chosen]
    labels = np.zeros(chosen.size, dtype=np.int64)
    pos_rows = np.arange(fg_idx.size)
    if annotations and fg_idx.size:
        labels[pos_rows] = gt_cats[argmax[fg_idx]]
        roi_reg = encode_deltas_array(boxes[fg_idx], gt_boxes[argmax[fg_idx]])
    else:
        roi_reg = np.zeros((0, 4))
    return roi_boxes, labels, pos_rows, roi_reg


def save_detector(path, detector: Detector, extra: dict | None = None) -> None:
    manifest = {
        "format": 1,
        "backbone": detector.cfg.backbone.to_dict(),
        "pyramid": detector.cfg.pyramid.to_dict(),
        "detector": detector.cfg.to_dict(),
    }
    if extra:
        manifest.update(extra)
    arrays = {k: p.data for k, p in detector.named_params().items()}
    save_checkpoint(path, arrays, manifest)


def load_detector(path) -> tuple[Detector, dict]:
    arrays, manifest = load_checkpoint(path)
    cfg = DetectorConfig.from_dict(manifest["detector"])
    det = Detector(cfg)
    params = det.named_params()
    missing = set(params) - set(arrays)
    extra_keys = set(arrays) - set(params)
    if missing or extra_keys:
        raise ValueError(
            f"{path}: checkpoint does not match configuration "
            f"(missing={sorted(missing)[:3]}, unexpected={sorted(extra_keys)[:3]})"
        )
    for name, p in params.items():
        a = arrays[name]
        if a.shape != p.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: {a.shape} vs {p.data.shape}")
        p.data = a.astype(np.float32)
    return det, manifest
