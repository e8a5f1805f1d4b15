"""Prediction heads, box decoding, NMS and letterbox inversion.

Detections travel as float arrays with columns ``x1 y1 x2 y2 score class``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import HeadConfig
from .nn import Conv2d, Module
from .tensor import Tensor, _sigmoid_np


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple  # x1, y1, x2, y2 in pixels

    @classmethod
    def from_row(cls, row) -> "Detection":
        return cls(int(row[5]), float(row[4]), tuple(float(v) for v in row[:4]))


def to_detections(rows: np.ndarray) -> list[Detection]:
    return [Detection.from_row(r) for r in rows]


class Head(Module):
    """Per level, a 1x1 conv to 3 * (5 + nc) logits laid out (tx, ty, tw, th, obj, cls...) per anchor."""

    def __init__(self, in_channels: int, cfg: HeadConfig, input_size: int = 640, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        no = 5 + cfg.num_classes
        self.convs = [Conv2d(in_channels, 3 * no, 1, rng=rng) for _ in cfg.strides]
        # prior: ~8 objects per image, near-uniform class scores
        for conv, s in zip(self.convs, cfg.strides):
            b = conv.bias.data.reshape(3, no)
            b[:, 4] += np.log(8.0 / (input_size / s) ** 2)
            b[:, 5:] += np.log(0.6 / (cfg.num_classes - 0.99))

    @property
    def outputs_per_anchor(self) -> int:
        return 5 + self.cfg.num_classes

    def forward(self, p1: Tensor, p2: Tensor, p3: Tensor):
        return tuple(conv(p) for conv, p in zip(self.convs, (p1, p2, p3)))


def split_raw(raw: np.ndarray, num_classes: int) -> np.ndarray:
    """(N, 3*(5+nc), H, W) -> (N, 3, 5+nc, H, W) view."""
    n, c, h, w = raw.shape
    return raw.reshape(n, 3, 5 + num_classes, h, w)


def decode(raws, cfg: HeadConfig, conf_threshold: float = 0.25) -> list[np.ndarray]:
    """Raw head logits -> per-image candidate rows in input-image pixels."""
    per_image = None
    for level, raw in enumerate(raws):
        data = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
        p = _sigmoid_np(split_raw(data.astype(np.float64), cfg.num_classes))
        n, _, _, h, w = p.shape
        stride = cfg.strides[level]
        anchors = np.asarray(cfg.level_anchors(level), dtype=np.float64)
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = (2.0 * p[:, :, 0] - 0.5 + gx) * stride
        cy = (2.0 * p[:, :, 1] - 0.5 + gy) * stride
        bw = (2.0 * p[:, :, 2]) ** 2 * anchors[None, :, 0, None, None]
        bh = (2.0 * p[:, :, 3]) ** 2 * anchors[None, :, 1, None, None]
        cls_scores = p[:, :, 4:5] * p[:, :, 5:]
        cls_id = cls_scores.argmax(axis=2)
        score = cls_scores.max(axis=2)
        rows = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2, score, cls_id], axis=-1)
        rows = rows.reshape(n, -1, 6)
        if per_image is None:
            per_image = [[] for _ in range(n)]
        for i in range(n):
            keep = rows[i, :, 4] >= conf_threshold
            per_image[i].append(rows[i][keep])
    return [np.concatenate(parts, axis=0) if parts else np.zeros((0, 6)) for parts in per_image]


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner boxes, (N, 4) x (M, 4) -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _rank(rows: np.ndarray) -> np.ndarray:
    # score desc, then x1 asc, y1 asc, class asc
    return np.lexsort((rows[:, 5], rows[:, 1], rows[:, 0], -rows[:, 4]))


def nms(candidates: np.ndarray, iou_threshold: float = 0.45) -> np.ndarray:
    """Greedy per-class suppression of boxes overlapping a kept box by IoU > threshold."""
    rows = np.asarray(candidates, dtype=np.float64).reshape(-1, 6)
    if len(rows) == 0:
        return rows
    kept = []
    for c in np.unique(rows[:, 5]):
        sub = rows[rows[:, 5] == c]
        sub = sub[_rank(sub)]
        alive = np.ones(len(sub), dtype=bool)
        for i in range(len(sub)):
            if not alive[i]:
                continue
            kept.append(sub[i])
            rest = np.nonzero(alive[i + 1:])[0] + i + 1
            if len(rest):
                ious = box_iou(sub[i:i + 1, :4], sub[rest, :4])[0]
                alive[rest[ious > iou_threshold]] = False
    out = np.stack(kept)
    return out[_rank(out)]


@dataclass(frozen=True)
class LetterboxMeta:
    scale: float
    pad_left: int
    pad_top: int
    out_size: int = 640
    orig_width: int = 0
    orig_height: int = 0


def unletterbox(rows: np.ndarray, meta: LetterboxMeta) -> np.ndarray:
    """Map letterboxed-image rows back to original pixels, clamped to the image."""
    rows = np.array(rows, dtype=np.float64).reshape(-1, 6)
    rows[:, [0, 2]] = (rows[:, [0, 2]] - meta.pad_left) / meta.scale
    rows[:, [1, 3]] = (rows[:, [1, 3]] - meta.pad_top) / meta.scale
    if meta.orig_width:
        rows[:, [0, 2]] = np.clip(rows[:, [0, 2]], 0, meta.orig_width)
    if meta.orig_height:
        rows[:, [1, 3]] = np.clip(rows[:, [1, 3]], 0, meta.orig_height)
    return rows


def drop_degenerate(rows: np.ndarray) -> np.ndarray:
    ok = (rows[:, 2] > rows[:, 0]) & (rows[:, 3] > rows[:, 1])
    return rows[ok]
