"""Seeded synthetic detection data: coloured rectangles on a noisy background."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import Sample, save_ppm

COLORS = ((220, 40, 40), (40, 200, 60), (50, 80, 230), (230, 210, 40))
SIZES = ((64, 64), (80, 64), (64, 48), (96, 96), (72, 56), (64, 80), (48, 64), (128, 96))


def make_rectangles(n_images: int = 8, num_classes: int = 2, seed: int = 0, boxes_per_image=(1, 2),
                    min_side: int = 12, max_frac: float = 0.55) -> list[Sample]:
    """Each class is a fixed colour; boxes do not overlap.

    All boxes in image ``i`` share class ``i % num_classes`` so that no two
    targets of different classes compete for one coarse grid cell.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_images):
        w, h = SIZES[i % len(SIZES)]
        img = rng.integers(90, 140, size=(h, w, 3)).astype(np.uint8)
        rows = []
        want = int(rng.integers(boxes_per_image[0], boxes_per_image[1] + 1))
        tries = 0
        while len(rows) < want and tries < 200:
            tries += 1
            bw = int(rng.integers(min_side, max(min_side + 1, int(w * max_frac))))
            bh = int(rng.integers(min_side, max(min_side + 1, int(h * max_frac))))
            x1 = int(rng.integers(0, w - bw + 1))
            y1 = int(rng.integers(0, h - bh + 1))
            box = (x1, y1, x1 + bw, y1 + bh)
            if any(_overlap(box, r[1:]) for r in rows):
                continue
            cls = i % num_classes
            rows.append((cls, *box))
        for cls, x1, y1, x2, y2 in rows:
            img[y1:y2, x1:x2] = COLORS[cls % len(COLORS)]
        out.append(Sample(img, np.asarray(rows, dtype=np.float64), f"synthetic-{i}"))
    return out


def _overlap(a, b, margin=2):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def write_dataset(samples, directory, class_names, fmt: str = "voc") -> Path:
    """Write PPM images, per-image annotations and ``manifest.txt``; returns the manifest path."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img = f"img{i:03d}.ppm"
        save_ppm(root / img, s.image)
        if fmt == "voc":
            ann = f"img{i:03d}.xml"
            (root / ann).write_text(_voc(img, s, class_names), encoding="utf-8")
        elif fmt == "jsonl":
            ann = f"img{i:03d}.jsonl"
            recs = [json.dumps({"image": img, "class": class_names[int(c)], "x1": x1, "y1": y1, "x2": x2, "y2": y2},
                               sort_keys=True) for c, x1, y1, x2, y2 in s.annotations]
            (root / ann).write_text("".join(r + "\n" for r in recs), encoding="utf-8")
        else:
            raise ValueError(f"unknown annotation format {fmt!r}")
        lines.append(f"{img}\t{ann}")
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def _voc(filename, sample, class_names) -> str:
    objs = []
    for c, x1, y1, x2, y2 in sample.annotations:
        # VOC pixel indices are 1-based
        objs.append(f"  <object><name>{class_names[int(c)]}</name><bndbox><xmin>{x1 + 1:g}</xmin>"
                    f"<ymin>{y1 + 1:g}</ymin><xmax>{x2 + 1:g}</xmax><ymax>{y2 + 1:g}</ymax></bndbox></object>")
    h, w = sample.image.shape[:2]
    return (f"<annotation>\n  <filename>{filename}</filename>\n  <size><width>{w}</width><height>{h}</height>"
            f"<depth>3</depth></size>\n" + "\n".join(objs) + "\n</annotation>\n")
