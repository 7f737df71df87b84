"""Training loop: SGD with momentum, horizontal-flip augmentation,
per-epoch metrics and deterministic seeding.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Annotation, Box
from .model import Detector, DetectorConfig
from .nn import ops
from .nn.optim import SGDMomentum
from .proposal import assign_targets

DIVERGENCE_LIMIT = 1e4

METRIC_COLUMNS = ("epoch", "rpn_cls", "rpn_reg", "head_cls", "head_reg", "total")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_factor: float = 0.1
    lr_decay_at: float = 2.0 / 3.0  # fraction of epochs after which lr decays
    batch_size: int = 1
    seed: int = 0
    hflip: bool = True
    clip_grad_norm: float = 10.0  # 0 disables clipping
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def to_dict(self) -> dict:
        d = {
            "epochs": self.epochs,
            "base_lr": self.base_lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_decay_factor": self.lr_decay_factor,
            "lr_decay_at": self.lr_decay_at,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "hflip": self.hflip,
            "clip_grad_norm": self.clip_grad_norm,
            "detector": self.detector.to_dict(),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["detector"] = DetectorConfig.from_dict(d["detector"])
        return cls(**d)


def hflip(image: np.ndarray, annotations: list[Annotation]) -> tuple[np.ndarray, list[Annotation]]:
    """Mirror an (H,W,3) image and its boxes about the vertical axis."""
    width = image.shape[1]
    flipped = np.ascontiguousarray(image[:, ::-1])
    anns = [
        replace(a, box=Box(width - a.box.x - a.box.w, a.box.y, a.box.w, a.box.h))
        for a in annotations
    ]
    return flipped, anns


def rpn_loss(cls_logits, cls_labels, reg_pred, reg_targets):
    """(classification, regression) loss pair for sampled RPN anchors."""
    return (
        ops.bce_with_logits_mean(cls_logits, cls_labels),
        ops.smooth_l1_mean(reg_pred, reg_targets),
    )


def total_loss(*components):
    return ops.add_n(list(components))


def to_chw_float(image: np.ndarray) -> np.ndarray:
    """(H,W,3) uint8 -> (3,H,W) float32 in [0,1]."""
    return np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32) / 255.0


@dataclass
class TrainResult:
    model: Detector
    metrics: list[dict]
    config: TrainConfig


def train(records, cfg: TrainConfig, log=None) -> TrainResult:
    """Train a detector on in-memory scene records.

    records: sequence with .image (H,W,3 uint8) and .annotations. The same
    (seed, config, data) always produces the same checkpoint; loss blowups
    or NaNs abort with a diagnostic.
    """
    model = Detector(cfg.detector, seed=cfg.seed)
    params = model.named_params()
    opt = SGDMomentum(params, lr=cfg.base_lr, momentum=cfg.momentum,
                      weight_decay=cfg.weight_decay)
    rng_data = np.random.default_rng([cfg.seed, 11])
    rng_sample = np.random.default_rng([cfg.seed, 12])
    n = len(records)
    if cfg.epochs > 0 and n == 0:
        raise ValueError("cannot train on an empty dataset")

    images = [to_chw_float(r.image) for r in records]
    target_cache: dict[tuple[int, bool], object] = {}
    decay_epoch = int(np.floor(cfg.lr_decay_at * cfg.epochs))
    metrics: list[dict] = []

    for epoch in range(cfg.epochs):
        opt.lr = cfg.base_lr * (cfg.lr_decay_factor if cfg.epochs > 1 and epoch >= decay_epoch else 1.0)
        order = rng_data.permutation(n)
        flips = rng_data.random(n) < 0.5 if cfg.hflip else np.zeros(n, dtype=bool)
        sums = {k: 0.0 for k in METRIC_COLUMNS[1:]}
        opt.zero_grad()
        pending = 0
        for step, idx in enumerate(order):
            flip = bool(flips[step])
            if flip:
                img_hwc, anns = hflip(records[idx].image, records[idx].annotations)
                image = to_chw_float(img_hwc)
            else:
                image, anns = images[idx], records[idx].annotations
            key = (int(idx), flip)
            if key not in target_cache:
                h, w = image.shape[1:]
                target_cache[key] = assign_targets(
                    model.anchor_grids((w, h)), anns, cfg.detector.assignment, (w, h)
                )
            try:
                losses = model.forward_train(image, anns, rng_sample,
                                             raw_targets=target_cache[key])
            except ValueError as e:
                if "non-finite" in str(e):
                    raise RuntimeError(
                        f"training diverged at epoch {epoch} step {step}: {e}"
                    ) from e
                raise
            total = float(losses["total"].data)
            if not np.isfinite(total):
                raise RuntimeError(
                    f"NaN/inf loss at epoch {epoch} step {step} (image {idx}): "
                    f"components={[float(losses[k].data) for k in METRIC_COLUMNS[1:-1]]}"
                )
            if total > DIVERGENCE_LIMIT:
                raise RuntimeError(
                    f"training diverged at epoch {epoch} step {step}: total loss {total:.3g}"
                )
            loss = losses["total"]
            if cfg.batch_size > 1:
                loss = ops.scale(loss, 1.0 / cfg.batch_size)
            loss.backward()
            pending += 1
            if pending == cfg.batch_size:
                if cfg.clip_grad_norm > 0:
                    opt.clip_grad_norm(cfg.clip_grad_norm)
                opt.step()
                opt.zero_grad()
                pending = 0
            for k in sums:
                sums[k] += float(losses[k].data)
        if pending:
            if cfg.clip_grad_norm > 0:
                opt.clip_grad_norm(cfg.clip_grad_norm)
            opt.step()
            opt.zero_grad()
        row = {"epoch": epoch, **{k: sums[k] / max(1, n) for k in sums}}
        metrics.append(row)
        if log is not None:
            log(row)
    return TrainResult(model=model, metrics=metrics, config=cfg)


def write_metrics_csv(path, metrics: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(METRIC_COLUMNS) + "\n")
        for row in metrics:
            f.write(",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n")


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6f}"
