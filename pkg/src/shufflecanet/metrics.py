"""Precision/recall, all-point AP, mAP@0.5 and confusion matrices."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .head import box_iou


def _sorted_by_score(dets: np.ndarray) -> np.ndarray:
    return np.argsort(-dets[:, 4], kind="stable")


def match_detections(dets, gts, iou_threshold: float = 0.5):
    """Greedy same-class matching inside one image.

    ``dets`` rows are (x1, y1, x2, y2, score, class); ``gts`` rows are
    (class, x1, y1, x2, y2). Returns ``(order, tp, unmatched_gt)``: ``order``
    sorts detections by descending score (stable), ``tp[i]`` flags
    ``dets[order[i]]``.
    """
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 6)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    order = _sorted_by_score(dets)
    tp = np.zeros(len(dets), dtype=bool)
    used = np.zeros(len(gts), dtype=bool)
    if len(dets) and len(gts):
        ious = box_iou(dets[order, :4], gts[:, 1:])
        same = dets[order, 5][:, None] == gts[None, :, 0]
        for i in range(len(order)):
            cand = np.where(same[i] & ~used & (ious[i] >= iou_threshold), ious[i], -1.0)
            j = int(np.argmax(cand))
            if cand[j] >= 0:
                used[j] = True
                tp[i] = True
    return order, tp, int((~used).sum())


def pr_curve(flags, num_gt: int) -> list[tuple[float, float]]:
    """Cumulative (recall, precision) after each ranked detection."""
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0:
        return []
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    return [(float(t / num_gt), float(t / (t + f))) for t, f in zip(tp, fp)]


def average_precision(curve) -> float:
    """All-point interpolation: sum of recall steps times the best precision at or beyond them."""
    if not curve:
        return 0.0
    r = np.concatenate([[0.0], [c[0] for c in curve]])
    p = np.array([c[1] for c in curve])
    # best precision at recall >= R_i, scanning from the tail
    p_env = np.maximum.accumulate(p[::-1])[::-1]
    # fsum is correctly rounded, so zero-width steps (appended false positives) leave the sum unchanged
    return math.fsum((r[1:] - r[:-1]) * p_env)


@dataclass
class EvalReport:
    class_names: list
    ap: list                  # per class, None when the class has no ground truth
    map: float
    precision: float
    recall: float
    conf_threshold: float
    iou_threshold: float
    confusion: list           # (nc+1) x (nc+1), rows = truth, cols = prediction, last = background
    num_gt: list
    num_det: list
    excluded_classes: list

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        head = ["Methods"] + [f"AP-{n}" for n in self.class_names] + ["mAP"]
        vals = ["model"] + ["n/a" if a is None else f"{100 * a:.1f}" for a in self.ap] + [f"{100 * self.map:.1f}"]
        lines = ["\t".join(head), "\t".join(vals),
                 f"P={100 * self.precision:.2f}\tR={100 * self.recall:.2f}\tconf>={self.conf_threshold}\t"
                 f"IoU>={self.iou_threshold}"]
        return "\n".join(lines) + "\n"


def evaluate(predictions, ground_truths, num_classes: int, class_names=None, iou_threshold: float = 0.5,
             conf_threshold: float = 0.25) -> EvalReport:
    """Dataset-level AP per class and mAP over classes that have ground truth."""
    if len(predictions) != len(ground_truths):
        raise ValueError(f"{len(predictions)} prediction lists for {len(ground_truths)} images")
    preds = [np.asarray(p, dtype=np.float64).reshape(-1, 6) for p in predictions]
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 5) for g in ground_truths]
    for arr, col, what in [(p, 5, "prediction") for p in preds] + [(g, 0, "ground-truth") for g in gts]:
        if len(arr) and (arr[:, col].max() >= num_classes or arr[:, col].min() < 0):
            raise ValueError(f"{what} class id outside [0, {num_classes})")
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    if len(names) != num_classes:
        raise ValueError(f"{len(names)} class names for num_classes={num_classes}")

    aps, num_gt, num_det, excluded = [], [], [], []
    for c in range(num_classes):
        scores, flags = [], []
        n_gt = 0
        for p, g in zip(preds, gts):
            pc, gc = p[p[:, 5] == c], g[g[:, 0] == c]
            n_gt += len(gc)
            order, tp, _ = match_detections(pc, gc, iou_threshold)
            scores.append(pc[order, 4])
            flags.append(tp)
        scores = np.concatenate(scores) if scores else np.zeros(0)
        flags = np.concatenate(flags) if flags else np.zeros(0, bool)
        rank = np.argsort(-scores, kind="stable")
        num_gt.append(n_gt)
        num_det.append(int(len(scores)))
        if n_gt == 0:
            aps.append(None)
            excluded.append(names[c])
            continue
        aps.append(average_precision(pr_curve(flags[rank], n_gt)))
    valid = [a for a in aps if a is not None]
    m = float(np.mean(valid)) if valid else 0.0

    tp_total = fp_total = 0
    conf = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    for p, g in zip(preds, gts):
        op = p[p[:, 4] >= conf_threshold]
        _, tp, _ = match_detections(op, g, iou_threshold)
        tp_total += int(tp.sum())
        fp_total += int((~tp).sum())
        _confusion_update(conf, op, g, iou_threshold, num_classes)
    total_gt = sum(num_gt)
    precision = tp_total / (tp_total + fp_total) if tp_total + fp_total else 0.0
    recall = tp_total / total_gt if total_gt else 0.0
    return EvalReport(names, aps, m, float(precision), float(recall), conf_threshold, iou_threshold,
                      conf.tolist(), num_gt, num_det, excluded)


def _confusion_update(conf, dets, gts, iou_threshold, nc):
    """Class-agnostic greedy matching; matched pairs land at [truth, pred]."""
    order = _sorted_by_score(dets)
    used = np.zeros(len(gts), dtype=bool)
    ious = box_iou(dets[order, :4], gts[:, 1:]) if len(dets) and len(gts) else np.zeros((len(dets), len(gts)))
    for i, d in enumerate(order):
        pred = int(dets[d, 5])
        if len(gts):
            cand = np.where(~used & (ious[i] >= iou_threshold), ious[i], -1.0)
            j = int(np.argmax(cand))
            if cand[j] >= 0:
                used[j] = True
                conf[int(gts[j, 0]), pred] += 1
                continue
        conf[nc, pred] += 1
    for j in np.nonzero(~used)[0]:
        conf[int(gts[j, 0]), nc] += 1
