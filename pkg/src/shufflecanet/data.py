"""Image/annotation I/O, letterboxing and Mosaic augmentation.

Annotations are float arrays of rows ``(class, x1, y1, x2, y2)`` in 0-based
pixel corner coordinates.
"""
from __future__ import annotations

import json
import os
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .head import LetterboxMeta

GRAY = 114


class PPMError(ValueError):
    pass


class AnnotationError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray                       # H x W x 3 uint8
    annotations: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    source: str = ""

    def __post_init__(self):
        ann = np.array(self.annotations, dtype=np.float64).reshape(-1, 5)
        h, w = np.shape(self.image)[:2]
        # float round-off from scaling may overshoot an edge by a hair
        tol = 1e-6 * max(w, h, 1)
        if ((ann[:, 1] < -tol) | (ann[:, 2] < -tol) | (ann[:, 3] > w + tol) | (ann[:, 4] > h + tol)).any():
            raise ValueError(f"{self.source or 'sample'}: annotation box outside the {w}x{h} image")
        if ((ann[:, 3] <= ann[:, 1]) | (ann[:, 4] <= ann[:, 2])).any():
            raise ValueError(f"{self.source or 'sample'}: annotation box with x1 >= x2 or y1 >= y2")
        ann[:, [1, 3]] = np.clip(ann[:, [1, 3]], 0, w)
        ann[:, [2, 4]] = np.clip(ann[:, [2, 4]], 0, h)
        self.annotations = ann


# ---------------------------------------------------------------- PPM

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*([^\s#]+)")


def decode_ppm(raw: bytes) -> np.ndarray:
    if raw[:2] != b"P6":
        raise PPMError(f"bad magic {raw[:2]!r}: only binary PPM (P6) is supported")
    pos = 2
    vals = []
    for _ in range(3):
        m = _TOKEN.match(raw, pos)
        if not m:
            raise PPMError("truncated PPM header")
        try:
            vals.append(int(m.group(1)))
        except ValueError:
            raise PPMError(f"non-numeric PPM header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = vals
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}: only 8-bit (255) PPM is supported")
    if width <= 0 or height <= 0:
        raise PPMError(f"invalid PPM dimensions {width}x{height}")
    pos += 1  # single whitespace byte ends the header
    need = width * height * 3
    payload = raw[pos:pos + need]
    if len(payload) < need:
        raise PPMError(f"truncated PPM payload: expected {need} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def load_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_ppm(path, image: np.ndarray):
    Path(path).write_bytes(encode_ppm(image))


# ---------------------------------------------------------------- annotations

def parse_voc_xml(text: str, class_names, ignore=()) -> np.ndarray:
    """VOC-style XML -> rows (class, x1, y1, x2, y2); 1-based pixels become 0-based."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise AnnotationError(f"malformed annotation XML: {exc}") from exc
    names = list(class_names)
    rows = []
    for obj in root.iter("object"):
        name = (obj.findtext("name") or "").strip()
        if name in ignore:
            continue
        if name not in names:
            raise AnnotationError(f"unknown class label {name!r} (known: {names})")
        bb = obj.find("bndbox")
        if bb is None:
            raise AnnotationError(f"object {name!r} has no bndbox")
        coords = []
        for tag in ("xmin", "ymin", "xmax", "ymax"):
            val = bb.findtext(tag)
            if val is None:
                raise AnnotationError(f"object {name!r} bndbox is missing {tag}")
            coords.append(float(val) - 1.0)
        x1, y1, x2, y2 = coords
        if x1 >= x2 or y1 >= y2:
            raise AnnotationError(f"object {name!r} has empty box {coords}: xmin must be < xmax, ymin < ymax")
        rows.append((names.index(name), x1, y1, x2, y2))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5)


def parse_jsonl(text: str, class_names, image=None) -> np.ndarray:
    """One object per line: {image, class, x1, y1, x2, y2}; optionally filter by image."""
    names = list(class_names)
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"line {lineno}: invalid JSON ({exc})") from exc
        if image is not None and not _same_image(rec.get("image"), image):
            continue
        cls = rec.get("class")
        if isinstance(cls, str):
            if cls not in names:
                raise AnnotationError(f"line {lineno}: unknown class label {cls!r}")
            cls = names.index(cls)
        try:
            box = [float(rec[k]) for k in ("x1", "y1", "x2", "y2")]
        except KeyError as exc:
            raise AnnotationError(f"line {lineno}: missing field {exc}") from None
        if box[0] >= box[2] or box[1] >= box[3]:
            raise AnnotationError(f"line {lineno}: empty box {box}")
        rows.append((int(cls), *box))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5)


def _same_image(a, b) -> bool:
    if a is None:
        return False
    return str(a) == str(b) or os.path.basename(str(a)) == os.path.basename(str(b))


def read_manifest(path) -> list[tuple[str, str]]:
    """Lines of ``image<TAB>annotation``; relative paths resolve against the manifest."""
    base = Path(path).parent
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise AnnotationError(f"{path}:{lineno}: expected image<TAB>annotation")
        pairs.append(tuple(str(p if Path(p).is_absolute() else base / p) for p in parts))
    return pairs


def load_annotations(path, class_names, image=None) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".jsonl"):
        return parse_jsonl(text, class_names, image=image)
    return parse_voc_xml(text, class_names)


def load_dataset(manifest, class_names) -> list[Sample]:
    samples = []
    for img_path, ann_path in read_manifest(manifest):
        image = load_ppm(img_path)
        ann = load_annotations(ann_path, class_names, image=img_path)
        samples.append(Sample(image, clip_annotations(ann, image.shape[1], image.shape[0]), img_path))
    return samples


def clip_annotations(ann: np.ndarray, width: int, height: int) -> np.ndarray:
    ann = np.array(ann, dtype=np.float64).reshape(-1, 5)
    ann[:, [1, 3]] = np.clip(ann[:, [1, 3]], 0, width)
    ann[:, [2, 4]] = np.clip(ann[:, [2, 4]], 0, height)
    return ann[(ann[:, 3] > ann[:, 1]) & (ann[:, 4] > ann[:, 2])]


# ---------------------------------------------------------------- geometry

def resize_nearest(image: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (w, h) == (width, height):
        return image.copy()
    ys = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return image[ys[:, None], xs[None, :]]


def letterbox_geometry(width: int, height: int, out_size: int = 640) -> tuple[LetterboxMeta, int, int]:
    scale = out_size / max(width, height)
    nw = min(out_size, max(1, int(round(width * scale))))
    nh = min(out_size, max(1, int(round(height * scale))))
    meta = LetterboxMeta(scale, (out_size - nw) // 2, (out_size - nh) // 2, out_size, width, height)
    return meta, nw, nh


def letterbox(image: np.ndarray, out_size: int = 640):
    """Aspect-preserving nearest resize onto a gray out_size x out_size canvas."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"letterbox needs a non-empty H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    meta, nw, nh = letterbox_geometry(w, h, out_size)
    canvas = np.full((out_size, out_size, 3), GRAY, dtype=np.uint8)
    canvas[meta.pad_top:meta.pad_top + nh, meta.pad_left:meta.pad_left + nw] = resize_nearest(image, nw, nh)
    return canvas, meta


def letterbox_boxes(boxes: np.ndarray, meta: LetterboxMeta) -> np.ndarray:
    """Corner boxes (..., 4) from original to letterboxed pixels."""
    b = np.array(boxes, dtype=np.float64)
    b[..., [0, 2]] = b[..., [0, 2]] * meta.scale + meta.pad_left
    b[..., [1, 3]] = b[..., [1, 3]] * meta.scale + meta.pad_top
    return b


def unletterbox_boxes(boxes: np.ndarray, meta: LetterboxMeta) -> np.ndarray:
    b = np.array(boxes, dtype=np.float64)
    b[..., [0, 2]] = (b[..., [0, 2]] - meta.pad_left) / meta.scale
    b[..., [1, 3]] = (b[..., [1, 3]] - meta.pad_top) / meta.scale
    return b


def letterbox_sample(sample: Sample, out_size: int) -> tuple[Sample, LetterboxMeta]:
    img, meta = letterbox(sample.image, out_size)
    ann = sample.annotations.copy()
    ann[:, 1:] = letterbox_boxes(ann[:, 1:], meta)
    return Sample(img, ann, sample.source), meta


def mosaic(samples, seed, out_size: int = 640, min_area: float = 4.0, scale_range=(1.0, 1.0)) -> Sample:
    """Splice four samples around a random centre on a 2*out_size canvas, then halve.

    Each tile is the sample letterboxed to ``out_size`` (optionally rescaled
    by a factor drawn from ``scale_range``); tile k's inner corner sits on the
    centre point. Boxes are translated, clipped, and dropped when their
    clipped area falls below ``min_area`` canvas pixels.
    """
    samples = list(samples)
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    rng = np.random.default_rng(seed)
    s = out_size
    xc, yc = (int(v) for v in rng.integers(s // 2, 3 * s // 2 + 1, size=2))
    canvas = np.full((2 * s, 2 * s, 3), GRAY, dtype=np.uint8)
    all_ann = []
    for k, smp in enumerate(samples):
        tile, ann = _tile(smp, s, rng, scale_range)
        th, tw = tile.shape[:2]
        # destination rectangle on the canvas, before clipping
        x0 = xc - tw if k in (0, 2) else xc
        y0 = yc - th if k in (0, 1) else yc
        cx1, cy1 = max(x0, 0), max(y0, 0)
        cx2, cy2 = min(x0 + tw, 2 * s), min(y0 + th, 2 * s)
        canvas[cy1:cy2, cx1:cx2] = tile[cy1 - y0:cy2 - y0, cx1 - x0:cx2 - x0]
        if len(ann):
            b = ann.copy()
            b[:, [1, 3]] = np.clip(b[:, [1, 3]] + x0, cx1, cx2)
            b[:, [2, 4]] = np.clip(b[:, [2, 4]] + y0, cy1, cy2)
            area = (b[:, 3] - b[:, 1]) * (b[:, 4] - b[:, 2])
            all_ann.append(b[area >= min_area])
    out = resize_nearest(canvas, s, s)
    ann = np.concatenate(all_ann) if all_ann else np.zeros((0, 5))
    ann[:, 1:] *= 0.5
    return Sample(out, ann, "mosaic")


def _tile(smp: Sample, s: int, rng, scale_range):
    lb, meta = letterbox_sample(smp, s)
    lo, hi = scale_range
    f = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    if f == 1.0:
        return lb.image, lb.annotations
    size = max(1, int(round(s * f)))
    img = resize_nearest(lb.image, size, size)
    ann = lb.annotations.copy()
    ann[:, 1:] *= size / s
    return img, ann


def sample_seed(global_seed: int, epoch: int, index: int) -> int:
    """Per-sample RNG seed independent of worker scheduling."""
    return int(np.random.SeedSequence([global_seed, epoch, index]).generate_state(1)[0])
