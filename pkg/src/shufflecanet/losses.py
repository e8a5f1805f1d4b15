"""IoU-family box losses, BCE, target assignment and the total detection loss.

Box functions accept center-form ``(cx, cy, w, h)`` rows by default; pass
``fmt="xyxy"`` for corner form. Plain arrays give plain float64 arrays back,
``Tensor`` inputs stay on the tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import HeadConfig, LossConfig
from .tensor import Tensor

GUARD = 1e-9


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2,
                     b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]], axis=-1)


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                     b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], axis=-1)


def _prep(a, b, fmt):
    plain = not isinstance(a, Tensor) and not isinstance(b, Tensor)
    if fmt == "xyxy":
        if isinstance(a, Tensor) or isinstance(b, Tensor):
            raise ValueError("Tensor inputs must be center form")
        a, b = xyxy_to_cxcywh(a), xyxy_to_cxcywh(b)
    elif fmt != "cxcywh":
        raise ValueError(f"unknown box format {fmt!r}")
    dt = a.dtype if isinstance(a, Tensor) else b.dtype if isinstance(b, Tensor) else np.float64
    a = T.as_tensor(np.atleast_2d(a) if not isinstance(a, Tensor) else a, dt)
    b = T.as_tensor(np.atleast_2d(b) if not isinstance(b, Tensor) else b, dt)
    return a, b, plain


def _finish(t: Tensor, plain: bool, squeeze: bool):
    if not plain:
        return t
    out = t.data.astype(np.float64)
    return float(out[0]) if squeeze else out


def _terms(p: Tensor, g: Tensor):
    """IoU, normalised centre distance rho^2/c^2 and aspect term v, row-wise."""
    pcx, pcy, pw, ph = p[:, 0], p[:, 1], p[:, 2], p[:, 3]
    gcx, gcy, gw, gh = g[:, 0], g[:, 1], g[:, 2], g[:, 3]
    px1, px2, py1, py2 = pcx - pw * 0.5, pcx + pw * 0.5, pcy - ph * 0.5, pcy + ph * 0.5
    gx1, gx2, gy1, gy2 = gcx - gw * 0.5, gcx + gw * 0.5, gcy - gh * 0.5, gcy + gh * 0.5
    iw = T.clamp_min(T.minimum(px2, gx2) - T.maximum(px1, gx1), 0.0)
    ih = T.clamp_min(T.minimum(py2, gy2) - T.maximum(py1, gy1), 0.0)
    inter = iw * ih
    # areas from the same corners as the overlap, so identical boxes give IoU exactly 1
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    iou_ = inter / union
    cw = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    ch = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    c2 = cw * cw + ch * ch + GUARD
    dx, dy = pcx - gcx, pcy - gcy
    dist = (dx * dx + dy * dy) / c2
    da = T.arctan(gw / gh) - T.arctan(pw / ph)
    v = da * da * (4.0 / math.pi**2)
    return iou_, dist, v


def _beta(iou_: Tensor, v: Tensor) -> Tensor:
    # trade-off weight is held constant in the backward pass
    return Tensor(v.data / (1.0 - iou_.data + v.data + GUARD))


def iou(a, b, fmt: str = "cxcywh"):
    squeeze = np.ndim(a) == 1 and np.ndim(b) == 1 and not isinstance(a, Tensor)
    a, b, plain = _prep(a, b, fmt)
    return _finish(_terms(a, b)[0], plain, squeeze)


def ciou_loss(pred, gt, fmt: str = "cxcywh"):
    squeeze = np.ndim(pred) == 1 and np.ndim(gt) == 1 and not isinstance(pred, Tensor)
    p, g, plain = _prep(pred, gt, fmt)
    iou_, dist, v = _terms(p, g)
    loss = 1.0 - iou_ + dist + _beta(iou_, v) * v
    return _finish(loss, plain, squeeze)


def alpha_ciou_loss(pred, gt, alpha: float = 3.0, fmt: str = "cxcywh"):
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    squeeze = np.ndim(pred) == 1 and np.ndim(gt) == 1 and not isinstance(pred, Tensor)
    p, g, plain = _prep(pred, gt, fmt)
    iou_, dist, v = _terms(p, g)
    loss = 1.0 - iou_**alpha + dist**alpha + (_beta(iou_, v) * v) ** alpha
    return _finish(loss, plain, squeeze)


def bce(logit, target):
    """Binary cross-entropy on logits, via max(z,0) - z t + log1p(exp(-|z|))."""
    if isinstance(logit, Tensor):
        return T.bce_with_logits(logit, target)
    z = np.asarray(logit, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(out) if out.ndim == 0 else out


@dataclass
class LevelTargets:
    """Positive (image, anchor, row, col) slots of one level, grid units."""

    b: np.ndarray
    a: np.ndarray
    gj: np.ndarray
    gi: np.ndarray
    tbox: np.ndarray      # (K, 4): cx, cy relative to cell origin; w, h
    cls: np.ndarray
    gt_index: np.ndarray
    anchors: np.ndarray   # (K, 2) anchor size in grid units

    def __len__(self):
        return len(self.b)


@dataclass
class TargetSet:
    levels: list = field(default_factory=list)

    def __len__(self):
        return sum(len(lv) for lv in self.levels)


def _empty_level():
    z = np.zeros(0, dtype=np.int64)
    return LevelTargets(z, z, z, z, np.zeros((0, 4)), z, z, np.zeros((0, 2)))


def assign_targets(targets, head_cfg: HeadConfig, input_size: int, anchor_t: float = 4.0,
                   grid_sizes=None) -> TargetSet:
    """Match ground truths to anchors by the width/height ratio test.

    ``targets`` rows are ``(image, class, x1, y1, x2, y2)`` in letterboxed
    pixels. A GT is assigned to its containing cell plus the neighbouring
    cell on each axis whose edge is within half a cell of the centre.
    Entries come out ordered by (gt index, anchor, cell offset) per level.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 6)
    tol = 1e-6
    bad = (targets[:, 2] < -tol) | (targets[:, 3] < -tol) | (targets[:, 4] > input_size + tol) | \
          (targets[:, 5] > input_size + tol) | (targets[:, 4] <= targets[:, 2]) | (targets[:, 5] <= targets[:, 3])
    if bad.any():
        k = int(np.argmax(bad))
        raise ValueError(f"ground truth {k} {targets[k, 2:].tolist()} lies outside the "
                         f"{input_size}x{input_size} image or is degenerate")
    out = TargetSet()
    for level, stride in enumerate(head_cfg.strides):
        gh_, gw_ = grid_sizes[level] if grid_sizes else (input_size // stride, input_size // stride)
        anchors = np.asarray(head_cfg.level_anchors(level), dtype=np.float64) / stride
        rows = {k: [] for k in ("b", "a", "gj", "gi", "tbox", "cls", "gt_index", "anchors")}
        for t_idx, (img, cls, x1, y1, x2, y2) in enumerate(targets):
            gx, gy = (x1 + x2) / 2 / stride, (y1 + y2) / 2 / stride
            w, h = (x2 - x1) / stride, (y2 - y1) / stride
            for a_idx, (aw, ah) in enumerate(anchors):
                if max(w / aw, aw / w, h / ah, ah / h) >= anchor_t:
                    continue
                for ci, cj in _cells(gx, gy, gw_, gh_):
                    rows["b"].append(int(img))
                    rows["a"].append(a_idx)
                    rows["gj"].append(cj)
                    rows["gi"].append(ci)
                    rows["tbox"].append((gx - ci, gy - cj, w, h))
                    rows["cls"].append(int(cls))
                    rows["gt_index"].append(t_idx)
                    rows["anchors"].append((aw, ah))
        if not rows["b"]:
            out.levels.append(_empty_level())
            continue
        out.levels.append(LevelTargets(
            np.array(rows["b"]), np.array(rows["a"]), np.array(rows["gj"]), np.array(rows["gi"]),
            np.array(rows["tbox"], dtype=np.float64), np.array(rows["cls"]), np.array(rows["gt_index"]),
            np.array(rows["anchors"], dtype=np.float64)))
    return out


def _cells(gx, gy, gw, gh):
    """Containing cell, then the x neighbour, then the y neighbour.

    A neighbour is taken on the side of the nearer cell edge when the centre
    is strictly closer than half a cell to it and the neighbour exists.
    """
    ci = min(max(int(math.floor(gx)), 0), gw - 1)
    cj = min(max(int(math.floor(gy)), 0), gh - 1)
    out = [(ci, cj)]
    fx, fy = gx - ci, gy - cj
    if fx < 0.5 and ci >= 1:
        out.append((ci - 1, cj))
    elif fx > 0.5 and ci <= gw - 2:
        out.append((ci + 1, cj))
    if fy < 0.5 and cj >= 1:
        out.append((ci, cj - 1))
    elif fy > 0.5 and cj <= gh - 2:
        out.append((ci, cj + 1))
    return out


def total_loss(raws, targets: TargetSet, cfg: LossConfig, num_classes: int):
    """Weighted sum of box (alpha-)CIoU, objectness BCE and class BCE.

    Returns ``(loss_tensor, components)`` where components holds floats
    ``box``, ``obj``, ``cls`` (already gain-weighted) and ``total``.
    """
    no = 5 + num_classes
    alpha = cfg.effective_alpha
    box_terms, cls_terms, obj = [], [], None
    n_box = n_cls = 0
    for level, raw in enumerate(raws):
        n, _, h, w = raw.shape
        r5 = T.reshape(raw, (n, 3, no, h, w))
        tobj = np.zeros((n, 3, h, w), dtype=raw.dtype)
        lt = targets.levels[level] if level < len(targets.levels) else _empty_level()
        if len(lt):
            ps = r5[lt.b, lt.a, :, lt.gj, lt.gi]                      # K, no
            pxy = T.sigmoid(ps[:, 0:2]) * 2.0 - 0.5
            pwh = (T.sigmoid(ps[:, 2:4]) * 2.0) ** 2 * lt.anchors.astype(raw.dtype)
            pbox = T.concat([pxy, pwh], axis=1)
            tbox = lt.tbox.astype(raw.dtype)
            lb = alpha_ciou_loss(pbox, tbox, alpha) if alpha != 1.0 else ciou_loss(pbox, tbox)
            box_terms.append(lb.sum())
            n_box += len(lt)
            with_iou = iou(pbox.detach(), Tensor(tbox))
            tobj[lt.b, lt.a, lt.gj, lt.gi] = np.clip(with_iou.data, 0.0, None)
            onehot = np.zeros((len(lt), num_classes), dtype=raw.dtype)
            onehot[np.arange(len(lt)), lt.cls] = 1.0
            cls_terms.append(T.bce_with_logits(ps[:, 5:], onehot).sum())
            n_cls += onehot.size
        lo = T.bce_with_logits(r5[:, :, 4], tobj).mean() * cfg.balance[level]
        obj = lo if obj is None else obj + lo
    zero = Tensor(np.zeros((), dtype=obj.dtype))
    lbox = _sum(box_terms) * (1.0 / n_box) if n_box else zero
    lcls = _sum(cls_terms) * (1.0 / n_cls) if n_cls else zero
    lbox, lobj, lcls = lbox * cfg.box_gain, obj * cfg.obj_gain, lcls * cfg.cls_gain
    loss = lbox + lobj + lcls
    comps = {"box": float(lbox.data), "obj": float(lobj.data), "cls": float(lcls.data), "total": float(loss.data)}
    return loss, comps


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
