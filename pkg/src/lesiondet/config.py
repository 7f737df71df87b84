"""Flat key=value configuration with CLI-over-file-over-default precedence.

Every tunable of the pipeline has a named key here; the CLI maps its flags
onto the same keys, so a config file plus overrides resolves to one
TrainConfig snapshot that is echoed into run manifests.
"""
from __future__ import annotations

from dataclasses import replace

from .geometry import AssignmentConfig
from .head import HeadConfig
from .model import DetectorConfig, RoISamplerConfig
from .proposal import AnchorConfig, ProposalConfig, SamplingConfig
from .pyramid import BackboneSpec, PyramidConfig
from .training import TrainConfig


def parse_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    options: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            options[key.strip()] = value.strip()
    return options


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "on", "yes"):
        return True
    if s in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"expected on/off boolean, got {v!r}")


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


# key -> (section, field, parser)
_KEYS = {
    "epochs": ("train", "epochs", int),
    "base_lr": ("train", "base_lr", float),
    "momentum": ("train", "momentum", float),
    "weight_decay": ("train", "weight_decay", float),
    "lr_decay_factor": ("train", "lr_decay_factor", float),
    "lr_decay_at": ("train", "lr_decay_at", float),
    "batch_size": ("train", "batch_size", int),
    "seed": ("train", "seed", int),
    "hflip": ("train", "hflip", _bool),
    "clip_grad_norm": ("train", "clip_grad_norm", float),
    "arch": ("pyramid", "mode", str),
    "pyramid_channels": ("pyramid", "channels", int),
    "backbone_channels": ("backbone", "stage_channels", _ints),
    "backbone_blocks": ("backbone", "stage_blocks", _ints),
    "anchor_scales": ("anchors", "scales", _floats),
    "anchor_ratios": ("anchors", "aspect_ratios", _floats),
    "anchor_reference_side": ("anchors", "reference_side",
                              lambda v: None if v in ("", "input") else float(v)),
    "cf_proposal": ("assignment", "cf_enabled", _bool),
    "cf_iou_floor": ("assignment", "cf_iou_floor", float),
    "positive_iou": ("assignment", "positive_iou", float),
    "negative_iou": ("assignment", "negative_iou", float),
    "keep_argmax_positive": ("assignment", "keep_argmax_positive", _bool),
    "cf_max_anchor_side": ("assignment", "cf_max_anchor_side", float),
    "rpn_batch": ("rpn_sampling", "batch", int),
    "rpn_positive_fraction": ("rpn_sampling", "positive_fraction", float),
    "pre_nms_per_level": ("proposals", "pre_nms_per_level", int),
    "post_nms_total": ("proposals", "post_nms_total", int),
    "rpn_nms_threshold": ("proposals", "nms_threshold", float),
    "proposal_min_size": ("proposals", "min_size", float),
    "roi_batch": ("rois", "batch", int),
    "roi_positive_fraction": ("rois", "positive_fraction", float),
    "fg_iou": ("rois", "fg_iou", float),
    "cf_roi_sampling": ("rois", "cf_enabled", _bool),
    "pool_size": ("head", "pool_size", int),
    "head_hidden": ("head", "hidden", int),
    "score_threshold": ("head", "score_threshold", float),
    "max_detections": ("head", "max_detections", int),
    "det_nms_threshold": ("head", "nms_threshold", float),
    "roi_align_sampling": ("head", "sampling", int),
}

KNOWN_KEYS = tuple(sorted(_KEYS))


def build_train_config(options: dict[str, str]) -> TrainConfig:
    """Resolve a flat option dict (already merged by precedence) to configs."""
    sections: dict[str, dict] = {}
    for key, value in options.items():
        if key not in _KEYS:
            raise ValueError(f"unknown config key {key!r}; known keys: {', '.join(KNOWN_KEYS)}")
        section, fname, parse = _KEYS[key]
        try:
            sections.setdefault(section, {})[fname] = parse(value)
        except ValueError as e:
            raise ValueError(f"config key {key!r}: {e}") from e

    detector = DetectorConfig(
        backbone=BackboneSpec(**sections.get("backbone", {})),
        pyramid=PyramidConfig(**sections.get("pyramid", {})),
        anchors=AnchorConfig(**sections.get("anchors", {})),
        assignment=AssignmentConfig(**sections.get("assignment", {})),
        rpn_sampling=SamplingConfig(**sections.get("rpn_sampling", {})),
        proposals=ProposalConfig(**sections.get("proposals", {})),
        rois=RoISamplerConfig(**sections.get("rois", {})),
        head=HeadConfig(**sections.get("head", {})),
    )
    return TrainConfig(detector=detector, **sections.get("train", {}))


def merge_options(*layers: dict[str, str]) -> dict[str, str]:
    """Later layers win (defaults < config file < CLI flags)."""
    merged: dict[str, str] = {}
    for layer in layers:
        for k, v in layer.items():
            if v is not None:
                merged[k] = v
    return merged


def replace_head(cfg: DetectorConfig, **kwargs) -> DetectorConfig:
    return replace(cfg, head=replace(cfg.head, **kwargs))
