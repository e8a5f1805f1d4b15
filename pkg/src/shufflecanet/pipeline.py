"""Image-in, detections-out inference path."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .data import letterbox
from .head import decode, drop_degenerate, nms, unletterbox
from .model import Detector, images_to_tensor


def detect_batch(model: Detector, images, conf_threshold=0.25, iou_threshold=0.45) -> list[np.ndarray]:
    """Letterbox, forward in eval mode, decode, NMS, map back to original pixels."""
    size = model.cfg.input_size
    boxed, metas = zip(*(letterbox(im, size) for im in images)) if len(images) else ((), ())
    if not boxed:
        return []
    was_training = model.training
    model.eval()
    try:
        raws = model(images_to_tensor(boxed, model.backbone.stem[0].conv.weight.dtype))
    finally:
        model.train(was_training)
    cands = decode(raws, model.cfg.head, conf_threshold)
    out = []
    for rows, meta in zip(cands, metas):
        kept = nms(rows, iou_threshold)
        out.append(drop_degenerate(unletterbox(kept, meta)))
    return out


def detect(model: Detector, images, conf_threshold=0.25, iou_threshold=0.45, batch_size=8) -> list[np.ndarray]:
    out = []
    for i in range(0, len(images), batch_size):
        out.extend(detect_batch(model, images[i:i + batch_size], conf_threshold, iou_threshold))
    return out


BOX_COLORS = ((255, 0, 0), (0, 255, 0), (0, 0, 255))


def render(image: np.ndarray, rows: np.ndarray, thickness: int = 2) -> np.ndarray:
    """Copy of ``image`` with box outlines; class k uses BOX_COLORS[k % 3]."""
    out = np.array(image, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    for x1, y1, x2, y2, _, cls in np.asarray(rows, dtype=np.float64).reshape(-1, 6):
        color = BOX_COLORS[int(cls) % len(BOX_COLORS)]
        l, t = int(np.clip(np.floor(x1), 0, w - 1)), int(np.clip(np.floor(y1), 0, h - 1))
        r, b = int(np.clip(np.ceil(x2), 1, w)), int(np.clip(np.ceil(y2), 1, h))
        out[t:min(t + thickness, b), l:r] = color
        out[max(b - thickness, t):b, l:r] = color
        out[t:b, l:min(l + thickness, r)] = color
        out[t:b, max(r - thickness, l):r] = color
    return out


@dataclass
class BenchReport:
    mean_ms: float
    median_ms: float
    std_ms: float
    trials: int
    warmup: int
    input_size: int
    parameters: int

    def to_dict(self) -> dict:
        return asdict(self)


def bench(model: Detector, input_size: int | None = None, trials: int = 100, warmup: int = 10,
          seed: int = 0, conf_threshold: float = 0.25, iou_threshold: float = 0.45) -> BenchReport:
    """Wall-clock latency of one single-image forward + decode + NMS."""
    from .blocks import count_parameters

    size = input_size or model.cfg.input_size
    image = np.random.default_rng(seed).integers(0, 256, size=(size, size, 3)).astype(np.uint8)
    times = []
    for i in range(warmup + trials):
        t0 = time.perf_counter()
        detect_batch(model, [image], conf_threshold, iou_threshold)
        if i >= warmup:
            times.append((time.perf_counter() - t0) * 1000.0)
    arr = np.asarray(times)
    return BenchReport(float(arr.mean()), float(np.median(arr)), float(arr.std()), trials, warmup, size,
                       count_parameters(model))
