"""Full detector: backbone -> neck -> heads."""
from __future__ import annotations

import numpy as np

from .blocks import Backbone
from .config import ModelConfig
from .head import Head
from .neck import BiFPN
from .nn import Module
from .tensor import Tensor


class Detector(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg.backbone, rng)
        self.neck = BiFPN(cfg.backbone.stage_channels, cfg.neck, rng)
        self.head = Head(cfg.neck.neck_channels, cfg.head, cfg.input_size, rng)

    def forward(self, x: Tensor):
        return self.head(*self.neck(*self.backbone(x)))


def images_to_tensor(images, dtype=np.float32) -> Tensor:
    """Stack HxWx3 uint8 images into an N x 3 x H x W tensor scaled to [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images]).astype(dtype) / 255.0
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)
