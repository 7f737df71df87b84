"""Two-stage mini-lesion detector with a stride-1 feature pyramid option,
center-focus anchor assignment, and a calibrated synthetic fundus dataset.
"""
from .geometry import Annotation, AssignmentConfig, Box, box_center, cf_anchor_label, contains_point, iou
from .head import Detection, HeadConfig, RoI
from .model import Detector, DetectorConfig, load_detector, save_detector
from .pyramid import BackboneSpec, FeatureMapSpec, PyramidConfig, pyramid_shapes
from .proposal import Anchor, AnchorConfig, Proposal, SamplingConfig
from .synthdata import SceneRecord, SynthConfig, generate_scene
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Annotation", "AssignmentConfig", "Box", "box_center", "cf_anchor_label",
    "contains_point", "iou", "Detection", "HeadConfig", "RoI", "Detector",
    "DetectorConfig", "load_detector", "save_detector", "BackboneSpec",
    "FeatureMapSpec", "PyramidConfig", "pyramid_shapes", "Anchor",
    "AnchorConfig", "Proposal", "SamplingConfig", "SceneRecord", "SynthConfig",
    "generate_scene", "TrainConfig", "train",
]
