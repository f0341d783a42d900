"""Shared-weight residual CNN classifier, multi-scale head and CAM."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .nn import Conv2d, GroupNorm, Linear, Module, ResBlock
from .resizer import ConfigError, ImagePyramid
from .tensor import ShapeError, Tensor

MIN_INPUT = 8


@dataclass
class BackboneConfig:
    stage_channels: list = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 1
    num_classes: int = 7

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]

    def validate(self) -> "BackboneConfig":
        if not self.stage_channels or any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage_channels must be a non-empty list of positive ints")
        if self.blocks_per_stage < 0 or self.num_classes < 1:
            raise ConfigError("blocks_per_stage must be >= 0 and num_classes >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class Backbone(Module):
    """stem(3x3) -> [stride-2 conv + ResBlocks] per stage -> GAP -> linear."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg.validate()
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        c0 = cfg.stage_channels[0]
        self.stem = self.child("stem", Conv2d(3, c0, 3, rng, dtype=dtype))
        self.stem_norm = self.child("stem_norm", GroupNorm(c0, dtype=dtype))
        self.stages = []
        cin = c0
        for s, c in enumerate(cfg.stage_channels):
            down = self.child(f"stage{s}.down", Conv2d(cin, c, 3, rng, stride=2, dtype=dtype))
            norm = self.child(f"stage{s}.norm", GroupNorm(c, dtype=dtype))
            blocks = [self.child(f"stage{s}.block{b}", ResBlock(c, 3, rng, dtype=dtype))
                      for b in range(cfg.blocks_per_stage)]
            self.stages.append((down, norm, blocks))
            cin = c
        self.head = self.child("head", Linear(cin, cfg.num_classes, rng, dtype=dtype))

    def features(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected an N x 3 x h x w batch, got {image.shape}")
        if min(image.shape[2:]) < MIN_INPUT:
            raise ShapeError(f"input {image.shape} smaller than the {MIN_INPUT}x{MIN_INPUT} minimum")
        h = ops.relu(self.stem_norm(self.stem(image)))
        for down, norm, blocks in self.stages:
            h = ops.relu(norm(down(h)))
            for block in blocks:
                h = block(h)
        return h

    def forward(self, image: Tensor):
        """Returns ``(logits [N, C], last feature maps)``."""
        fmap = self.features(image)
        return self.head(ops.global_avg_pool(fmap)), fmap


def backbone_forward(model: Backbone, image: Tensor):
    return model(image)


def multiscale_predict(model: Backbone, pyramid: ImagePyramid, order=None):
    """Sum per-level logits (ascending size unless ``order`` given), then softmax.

    Returns ``(probabilities ndarray [N, C], summed logits Tensor)``.
    """
    idx = list(range(len(pyramid.levels))) if order is None else list(order)
    total = None
    for j in idx:
        logits, _ = model(pyramid.levels[j])
        total = logits if total is None else ops.add(total, logits)
    return ops.softmax(total.data), total


def cam(model: Backbone, image: Tensor, class_index: int | None = None) -> np.ndarray:
    """Class activation map for a single image, shaped [h, w] in [0, 1].

    ``class_index`` defaults to the predicted class.
    """
    if image.shape[0] != 1:
        raise ShapeError(f"cam takes a single image, got batch {image.shape}")
    logits, fmap = model(image)
    if class_index is None:
        class_index = int(np.argmax(logits.data[0]))
    if not 0 <= class_index < model.cfg.num_classes:
        raise ValueError(f"class_index {class_index} outside [0, {model.cfg.num_classes})")
    return cam_from_features(fmap.data[0], model.head.weight.data[class_index], image.shape[2:])


def cam_from_features(fmap: np.ndarray, class_weights: np.ndarray, size) -> np.ndarray:
    """Weighted channel sum, ReLU, bilinear upsample to ``size``, min-max to [0, 1]."""
    raw = np.tensordot(class_weights, fmap, axes=(0, 0))
    raw = np.maximum(raw, 0)
    up = ops.bilinear_resize(Tensor(raw[None, None]), *size).data[0, 0]
    lo, hi = up.min(), up.max()
    if hi - lo <= 0:
        return np.zeros_like(up)
    return (up - lo) / (hi - lo)


def save_cam_pngs(heatmap: np.ndarray, image: np.ndarray, heat_path, overlay_path) -> None:
    """Write the heatmap as 8-bit grayscale and a 50% alpha overlay on ``image`` (3 x h x w in [0, 1])."""
    from PIL import Image

    gray = np.round(np.clip(heatmap, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(heat_path)
    rgb = np.clip(image.transpose(1, 2, 0), 0, 1)
    # red channel carries the heat
    heat_rgb = np.stack([heatmap, np.zeros_like(heatmap), 1 - heatmap], axis=-1)
    blend = 0.5 * rgb + 0.5 * heat_rgb
    Image.fromarray(np.round(blend * 255).astype(np.uint8), mode="RGB").save(overlay_path)
