"""Second stage: pool proposal regions from the pyramid, classify, regress.

In lfpn mode every RoI pools from the stride-1 P0 map; the fpn baseline
routes RoIs to a level by size; plain pools from the single top map.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import Box, clip_box_array
from .nn import Linear, Tensor, ops
from .proposal import decode_deltas_array, nms

FPN_LEVEL_K0 = 4
FPN_CANONICAL_SIDE = 224.0


@dataclass(frozen=True)
class RoI:
    box: Box
    source: str = "rpn"


@dataclass(frozen=True)
class Detection:
    box: Box
    category: int
    score: float


@dataclass(frozen=True)
class HeadConfig:
    pool_size: int = 7
    score_threshold: float = 0.1
    max_detections: int = 100
    nms_threshold: float = 0.5
    hidden: int = 256
    sampling: int = 2  # bilinear sample points per pooled-bin axis

    def __post_init__(self):
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if not 0 <= self.score_threshold <= 1:
            raise ValueError("score_threshold must be in [0, 1]")


def select_pool_level(roi, mode: str) -> int:
    """Pyramid level an RoI pools from: always 0 for lfpn, size rule for fpn."""
    if mode == "lfpn":
        return 0
    if mode == "plain":
        return 5
    if mode == "fpn":
        box = roi.box if isinstance(roi, RoI) else roi
        k = FPN_LEVEL_K0 + int(np.floor(np.log2(np.sqrt(box.w * box.h) / FPN_CANONICAL_SIDE)))
        return int(np.clip(k, 2, 5))
    raise ValueError(f"unknown mode {mode!r}")


def select_pool_levels_array(boxes: np.ndarray, mode: str) -> np.ndarray:
    n = boxes.shape[0]
    if mode == "lfpn":
        return np.zeros(n, dtype=np.int64)
    if mode == "plain":
        return np.full(n, 5, dtype=np.int64)
    k = FPN_LEVEL_K0 + np.floor(np.log2(np.sqrt(boxes[:, 2] * boxes[:, 3]) / FPN_CANONICAL_SIDE))
    return np.clip(k, 2, 5).astype(np.int64)


def roi_pool(feature: np.ndarray, roi, pool_size: int, spatial_scale: float = 1.0,
             sampling: int = 2) -> np.ndarray:
    """Bilinear average pooling of one RoI from a (C,H,W) feature map.

    The RoI is given in image coordinates; spatial_scale (1/stride) maps it
    onto the feature grid.
    """
    box = roi.box if isinstance(roi, RoI) else roi
    if box.w < 1.0 or box.h < 1.0:
        raise ValueError(f"degenerate RoI ({box.w}x{box.h}), need at least 1px extent")
    xyxy = np.array(
        [[box.x, box.y, box.x + box.w, box.y + box.h]], dtype=np.float64
    ) * spatial_scale
    feature = np.ascontiguousarray(feature)
    return kernels.active().roi_align_forward(feature, xyxy, pool_size, sampling)[0]


def roi_align_tensor(feature: Tensor, boxes: np.ndarray, pool_size: int,
                     spatial_scale: float, sampling: int) -> Tensor:
    """Differentiable batched pooling; boxes are (N,4) x,y,w,h image coords."""
    xyxy = np.stack(
        [boxes[:, 0], boxes[:, 1], boxes[:, 0] + boxes[:, 2], boxes[:, 1] + boxes[:, 3]],
        axis=1,
    ) * spatial_scale
    return ops.roi_align(feature, xyxy, pool_size, sampling)


class RoIHead:
    """Two hidden layers, then 5-way class scores and per-class box deltas."""

    def __init__(self, channels: int, cfg: HeadConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        fin = channels * cfg.pool_size * cfg.pool_size
        self.cfg = cfg
        self.fc1 = Linear(fin, cfg.hidden, rng=rng)
        self.fc2 = Linear(cfg.hidden, cfg.hidden, rng=rng)
        self.cls = Linear(cfg.hidden, 5, rng=rng, init_std=0.01)
        self.reg = Linear(cfg.hidden, 16, rng=rng, init_std=0.001)

    def classify_and_regress(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        """pooled: (N,C,P,P) -> scores logits (N,5), deltas (N,4,4)."""
        n = pooled.data.shape[0]
        x = ops.reshape(pooled, (n, -1))
        x = ops.relu(self.fc1(x))
        x = ops.relu(self.fc2(x))
        scores = self.cls(x)
        deltas = ops.reshape(self.reg(x), (n, 4, 4))
        return scores, deltas

    __call__ = classify_and_regress

    def params(self):
        return {"fc1": self.fc1, "fc2": self.fc2, "cls": self.cls, "reg": self.reg}


def decode_detections(
    roi_boxes: np.ndarray,
    class_probs: np.ndarray,
    deltas: np.ndarray,
    cfg: HeadConfig,
    image_size: tuple[int, int],
) -> list[Detection]:
    """Head outputs to final detections: threshold, per-class NMS, global cap.

    roi_boxes: (N,4); class_probs: (N,5) softmax with background first;
    deltas: (N,4,4) per foreground class.
    """
    width, height = image_size
    picked: list[tuple[float, int, int, np.ndarray]] = []
    for c in range(1, 5):
        scores_c = class_probs[:, c]
        keep = scores_c >= cfg.score_threshold
        if not keep.any():
            continue
        idx = np.flatnonzero(keep)
        boxes = decode_deltas_array(roi_boxes[idx], deltas[idx, c - 1, :], clamp=True)
        boxes = clip_box_array(boxes, width, height)
        kept = nms(boxes, scores_c[idx], cfg.nms_threshold)
        for i in kept:
            picked.append((float(scores_c[idx[i]]), c, int(idx[i]), boxes[i]))
    # highest score first; ties by category then source RoI for determinism
    picked.sort(key=lambda t: (-t[0], t[1], t[2]))
    picked = picked[: cfg.max_detections]
    return [Detection(box=Box(*b), category=c, score=s) for s, c, _, b in picked]


def write_detections(path, per_image: dict[str, list[Detection]]) -> None:
    """JSON-lines, one record per detection."""
    with open(path, "w", encoding="utf-8") as f:
        for image_id in sorted(per_image):
            for d in per_image[image_id]:
                rec = {
                    "image_id": image_id,
                    "x": d.box.x,
                    "y": d.box.y,
                    "w": d.box.w,
                    "h": d.box.h,
                    "c": d.category,
                    "score": d.score,
                }
                f.write(json.dumps(rec) + "\n")


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                det = Detection(
                    box=Box(rec["x"], rec["y"], rec["w"], rec["h"]),
                    category=int(rec["c"]),
                    score=float(rec["score"]),
                )
            except (KeyError, ValueError, json.JSONDecodeError) as e:
                raise ValueError(f"{path}:{lineno}: bad detection record: {e}") from e
            out.setdefault(rec["image_id"], []).append(det)
    return out
