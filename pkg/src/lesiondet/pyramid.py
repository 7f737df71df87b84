"""Multi-scale feature pyramid over a small residual backbone.

Three modes:

* ``plain`` - single stride-32 top map (second stage pools from it).
* ``fpn``   - top-down pyramid P2..P5, coarsest-to-finest ratio 4.
* ``lfpn``  - extends the top-down pathway through P1 down to a stride-1
  P0 at full input resolution, built by lifting the raw image with a 1x1
  convolution and summing it with the upsampled P1.

The backbone is deliberately tiny but keeps the 5-stage / stride-32
contract, so the pyramid code never assumes anything beyond stage shapes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Tensor, ops

MODES = ("plain", "fpn", "lfpn")


@dataclass(frozen=True)
class BackboneSpec:
    """Five downsampling stages, each halving resolution once.

    stage_channels[i] is the output width of stage i+1; stage_blocks[i]
    counts the residual blocks appended after the strided stem conv.
    """

    stage_channels: tuple[int, ...] = (8, 12, 16, 24, 32)
    stage_blocks: tuple[int, ...] = (1, 1, 1, 1, 1)

    def __post_init__(self):
        if len(self.stage_channels) != 5 or len(self.stage_blocks) != 5:
            raise ValueError("backbone must have exactly 5 stages (strides 2..32)")
        if any(c <= 0 for c in self.stage_channels):
            raise ValueError("stage channels must be positive")

    @property
    def stage_count(self) -> int:
        return 5

    def to_dict(self) -> dict:
        return {"stage_channels": list(self.stage_channels), "stage_blocks": list(self.stage_blocks)}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(tuple(d["stage_channels"]), tuple(d["stage_blocks"]))


@dataclass(frozen=True)
class PyramidConfig:
    mode: str = "lfpn"
    channels: int = 64  # shared width D of every emitted level (and the P0 lift)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.channels <= 0:
            raise ValueError("channels must be positive")

    @property
    def levels(self) -> tuple[int, ...]:
        if self.mode == "lfpn":
            return (0, 1, 2, 3, 4, 5)
        if self.mode == "fpn":
            return (2, 3, 4, 5)
        return (5,)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "channels": self.channels}

    @classmethod
    def from_dict(cls, d: dict) -> "PyramidConfig":
        return cls(d["mode"], d["channels"])


@dataclass(frozen=True)
class FeatureMapSpec:
    level: int
    stride: int
    height: int
    width: int
    channels: int


def proposal_levels(mode: str) -> tuple[int, ...]:
    """Pyramid levels the region-proposal stage runs on."""
    if mode == "lfpn":
        return (1, 2, 3, 4, 5)  # P0 is reserved for second-stage pooling
    if mode == "fpn":
        return (2, 3, 4, 5)
    if mode == "plain":
        return (5,)
    raise ValueError(f"unknown mode {mode!r}")


def check_input_size(height: int, width: int) -> None:
    if height % 32 != 0 or width % 32 != 0:
        raise ValueError(f"input size must be divisible by 32, got {height}x{width}")


def pyramid_shapes(input_size, cfg: PyramidConfig) -> list[FeatureMapSpec]:
    """Predicted level shapes without running the network."""
    if isinstance(input_size, (int, np.integer)):
        h = w = int(input_size)
    else:
        h, w = map(int, input_size)
    check_input_size(h, w)
    return [
        FeatureMapSpec(level=i, stride=2 ** i, height=h // 2 ** i, width=w // 2 ** i,
                       channels=cfg.channels)
        for i in cfg.levels
    ]


class _ResidualBlock:
    def __init__(self, channels: int, rng):
        self.conv1 = Conv2d(channels, channels, 3, pad=1, rng=rng)
        self.conv2 = Conv2d(channels, channels, 3, pad=1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(ops.relu(self.conv1(x)))
        return ops.relu(ops.add(x, y))

    def params(self):
        return {"conv1": self.conv1, "conv2": self.conv2}


class TinyBackbone:
    """Five stages of strided conv + residual blocks; strides 2,4,8,16,32."""

    def __init__(self, spec: BackboneSpec, rng=None):
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        self.stages = []
        cin = 3
        for cout, nblocks in zip(spec.stage_channels, spec.stage_blocks):
            stem = Conv2d(cin, cout, 3, stride=2, pad=1, rng=rng)
            blocks = [_ResidualBlock(cout, rng) for _ in range(nblocks)]
            self.stages.append((stem, blocks))
            cin = cout

    def __call__(self, image: Tensor) -> list[Tensor]:
        """image: (3,H,W) in [0,1]. Returns [C1..C5]."""
        _, h, w = image.data.shape
        check_input_size(h, w)
        feats = []
        x = image
        for stem, blocks in self.stages:
            x = ops.relu(stem(x))
            for blk in blocks:
                x = blk(x)
            feats.append(x)
        return feats

    def params(self):
        tree = {}
        for i, (stem, blocks) in enumerate(self.stages, start=1):
            stage = {"stem": stem}
            for j, blk in enumerate(blocks, start=1):
                stage[f"block{j}"] = blk
            tree[f"stage{i}"] = stage
        return tree


def backbone_forward(image: Tensor, backbone: TinyBackbone) -> list[Tensor]:
    return backbone(image)


def upsample2x(f: Tensor) -> Tensor:
    """Nearest-neighbor doubling of a (C,H,W) feature map."""
    return ops.upsample_nearest2x(f)


def lateral_merge(bottom_up: Tensor, top_down: Tensor, proj: Conv2d | None,
                  smooth: Conv2d) -> Tensor:
    """Project the bottom-up map to pyramid width, sum, smooth with 3x3."""
    lat = proj(bottom_up) if proj is not None else bottom_up
    if lat.data.shape[1:] != top_down.data.shape[1:]:
        raise ValueError(
            f"lateral merge spatial mismatch: {lat.data.shape[1:]} vs {top_down.data.shape[1:]}"
        )
    return smooth(ops.add(lat, top_down))


class FeaturePyramid:
    """Builds the level map for one of the three modes."""

    def __init__(self, backbone_spec: BackboneSpec, cfg: PyramidConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        d = cfg.channels
        ch = backbone_spec.stage_channels
        self.laterals: dict[int, Conv2d] = {}
        self.smooths: dict[int, Conv2d] = {}
        self.lift: Conv2d | None = None
        lateral_levels = {"plain": (5,), "fpn": (2, 3, 4, 5), "lfpn": (1, 2, 3, 4, 5)}[cfg.mode]
        for lvl in lateral_levels:
            self.laterals[lvl] = Conv2d(ch[lvl - 1], d, 1, rng=rng)
            self.smooths[lvl] = Conv2d(d, d, 3, pad=1, rng=rng)
        if cfg.mode == "lfpn":
            self.lift = Conv2d(3, d, 1, rng=rng)
            self.smooths[0] = Conv2d(d, d, 3, pad=1, rng=rng)

    def __call__(self, image: Tensor, feats: list[Tensor]) -> dict[int, Tensor]:
        mode = self.cfg.mode
        if mode == "plain":
            return {5: self.smooths[5](self.laterals[5](feats[4]))}
        bottom_level = 1 if mode == "lfpn" else 2
        levels: dict[int, Tensor] = {}
        top: Tensor | None = None
        for lvl in range(5, bottom_level - 1, -1):
            lat = self.laterals[lvl](feats[lvl - 1])
            merged = lat if top is None else _checked_add(lat, top)
            p = self.smooths[lvl](merged)
            levels[lvl] = p
            top = upsample2x(p)
        if mode == "lfpn":
            levels[0] = self.smooths[0](_checked_add(self.lift(image), top))
        return levels

    def lift_only_p0(self, image: Tensor) -> Tensor:
        """P0 with the top-down input zeroed; isolates the raw-image lift path."""
        if self.lift is None:
            raise ValueError("lift path exists only in lfpn mode")
        return self.smooths[0](self.lift(image))

    def params(self):
        tree = {f"lateral{lvl}": conv for lvl, conv in self.laterals.items()}
        tree.update({f"smooth{lvl}": conv for lvl, conv in self.smooths.items()})
        if self.lift is not None:
            tree["lift"] = self.lift
        return tree


def _checked_add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"pyramid merge shape mismatch: {a.data.shape} vs {b.data.shape}")
    return ops.add(a, b)


def build_pyramid(image: Tensor, backbone: TinyBackbone, pyramid: FeaturePyramid) -> dict[int, Tensor]:
    """Full forward: backbone stages then top-down merge; keys are levels."""
    return pyramid(image, backbone(image))
