"""Slow, direct reference implementations used to cross-check the fast paths.

Everything here is written as plain loops over scalars and shares no code
with the implementations it checks, apart from the tiny sigmoid/BCE
formulas restated inline.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def bce(z: float, t: float) -> float:
    return max(z, 0.0) - z * t + math.log1p(math.exp(-abs(z)))


def hardswish(x: float) -> float:
    return x * min(max(x + 3.0, 0.0), 6.0) / 6.0


# ---------------------------------------------------------------- conv / attention

def naive_conv2d(x, w, bias=None, stride=1, pad=0, groups=1) -> np.ndarray:
    """Sextuple loop: batch, out channel, out row, out col, in channel, kernel row, kernel col."""
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    opg = cout // groups
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(cout):
            g = o // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ki in range(kh):
                        for kj in range(kw):
                            for c in range(cpg):
                                r, s = i * stride + ki - pad, j * stride + kj - pad
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[b, g * cpg + c, r, s] * w[o, c, ki, kj]
                    out[b, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def coordatt_scalar(x, f1_w, f1_b, fh_w, fh_b, fw_w, fw_b, act=hardswish) -> np.ndarray:
    """Direct transcription of the coordinate-attention equations for one image batch.

    ``f*_w`` are 2-D (out, in) matrices of the 1x1 convolutions.
    """
    n, c, h, w = x.shape
    mid = f1_w.shape[0]
    y = np.zeros_like(x, dtype=np.float64)
    for b in range(n):
        zh = [[sum(x[b, ch, i, j] for j in range(w)) / w for i in range(h)] for ch in range(c)]
        zw = [[sum(x[b, ch, i, j] for i in range(h)) / h for j in range(w)] for ch in range(c)]
        # shared transform over the concatenated (h + w) positions
        fh = [[act(f1_b[m] + sum(f1_w[m, ch] * zh[ch][i] for ch in range(c))) for i in range(h)] for m in range(mid)]
        fw = [[act(f1_b[m] + sum(f1_w[m, ch] * zw[ch][j] for ch in range(c))) for j in range(w)] for m in range(mid)]
        for ch in range(c):
            gh = [sigmoid(fh_b[ch] + sum(fh_w[ch, m] * fh[m][i] for m in range(mid))) for i in range(h)]
            gw = [sigmoid(fw_b[ch] + sum(fw_w[ch, m] * fw[m][j] for m in range(mid))) for j in range(w)]
            for i in range(h):
                for j in range(w):
                    y[b, ch, i, j] = x[b, ch, i, j] * gh[i] * gw[j]
    return y


# ---------------------------------------------------------------- boxes

def pixel_iou(a, b) -> float:
    """IoU of integer corner boxes by counting unit pixels on the grid."""
    xs = range(min(a[0], b[0]), max(a[2], b[2]))
    ys = range(min(a[1], b[1]), max(a[3], b[3]))
    inter = union = 0
    for px in xs:
        for py in ys:
            in_a = a[0] <= px < a[2] and a[1] <= py < a[3]
            in_b = b[0] <= px < b[2] and b[1] <= py < b[3]
            inter += in_a and in_b
            union += in_a or in_b
    return inter / union if union else 0.0


def corner_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def ciou_terms_scalar(p, g):
    """(iou, rho^2/c^2, v) for centre-form boxes, from the textbook definitions."""
    pa = (p[0] - p[2] / 2, p[1] - p[3] / 2, p[0] + p[2] / 2, p[1] + p[3] / 2)
    ga = (g[0] - g[2] / 2, g[1] - g[3] / 2, g[0] + g[2] / 2, g[1] + g[3] / 2)
    i = corner_iou(pa, ga)
    cw = max(pa[2], ga[2]) - min(pa[0], ga[0])
    ch = max(pa[3], ga[3]) - min(pa[1], ga[1])
    rho2 = (p[0] - g[0]) ** 2 + (p[1] - g[1]) ** 2
    v = 4 / math.pi ** 2 * (math.atan(g[2] / g[3]) - math.atan(p[2] / p[3])) ** 2
    return i, rho2 / (cw * cw + ch * ch + 1e-9), v


def alpha_ciou_scalar(p, g, alpha=3.0) -> float:
    i, d, v = ciou_terms_scalar(p, g)
    beta = v / (1 - i + v + 1e-9)
    return 1 - i ** alpha + d ** alpha + (beta * v) ** alpha


# ---------------------------------------------------------------- nms / matching / AP

def nms_reference(rows, iou_threshold) -> list[int]:
    """Indices kept, from the fixed-point definition of greedy suppression.

    A box is kept iff no kept box of its class ranked before it overlaps it
    by more than the threshold. Evaluated by memoised recursion over ranks.
    """
    rows = [tuple(r) for r in rows]

    def rank_key(k):
        r = rows[k]
        return (-r[4], r[0], r[1], r[5])

    order = sorted(range(len(rows)), key=rank_key)
    kept: dict[int, bool] = {}
    for pos, k in enumerate(order):
        kept[k] = not any(kept[q] and rows[q][5] == rows[k][5] and corner_iou(rows[q][:4], rows[k][:4]) > iou_threshold
                          for q in order[:pos])
    return [k for k in order if kept[k]]


def nms_subsets(rows, iou_threshold) -> list[int]:
    """Exhaustive form for tiny inputs: the unique subset satisfying the keep rule."""
    n = len(rows)

    def before(q, k):
        # input order breaks full ties, as the stable sort in nms does
        return (-rows[q][4], rows[q][0], rows[q][1], rows[q][5], q) < (-rows[k][4], rows[k][0], rows[k][1], rows[k][5], k)

    found = []
    for mask in itertools.product((False, True), repeat=n):
        ok = True
        for k in range(n):
            blocked = any(mask[q] and q != k and rows[q][5] == rows[k][5] and before(q, k)
                          and corner_iou(rows[q][:4], rows[k][:4]) > iou_threshold for q in range(n))
            if mask[k] == blocked:
                ok = False
                break
        if ok:
            found.append([k for k in range(n) if mask[k]])
    assert len(found) == 1, "keep rule must have a unique fixed point"
    return found[0]


def match_reference(dets, gts, iou_threshold=0.5):
    """TP flags in score order (stable) and the unmatched GT count, by plain loops."""
    order = sorted(range(len(dets)), key=lambda k: -dets[k][4])
    used = [False] * len(gts)
    flags = []
    for k in order:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if used[j] or g[0] != dets[k][5]:
                continue
            v = corner_iou(dets[k][:4], g[1:])
            if v >= iou_threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
        flags.append(best_j >= 0)
    return order, flags, used.count(False)


def ap_reference(flags, num_gt) -> float:
    """All-point interpolated AP, looping over each recall step."""
    if num_gt == 0:
        return 0.0
    tp = fp = 0
    pts = []
    for f in flags:
        tp += f
        fp += not f
        pts.append((tp / num_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for i, (r, _) in enumerate(pts):
        best = max(p for _, p in pts[i:])
        ap += (r - prev_r) * best
        prev_r = r
    return ap


def map_reference(preds, gts, num_classes, iou_threshold=0.5) -> float:
    aps = []
    for c in range(num_classes):
        scored, n_gt = [], 0
        for p, g in zip(preds, gts):
            pc = [r for r in p if r[5] == c]
            gc = [r for r in g if r[0] == c]
            n_gt += len(gc)
            order, flags, _ = match_reference(pc, gc, iou_threshold)
            scored += [(pc[k][4], f) for k, f in zip(order, flags)]
        if n_gt == 0:
            continue
        scored.sort(key=lambda t: -t[0])
        aps.append(ap_reference([f for _, f in scored], n_gt))
    return sum(aps) / len(aps) if aps else 0.0


# ---------------------------------------------------------------- targets and loss

def assign_reference(targets, strides, level_anchors, input_size, anchor_t=4.0):
    """Per level, the set of (gt, anchor, row, col) slots found by scanning every grid cell."""
    out = []
    for level, stride in enumerate(strides):
        n = input_size // stride
        slots = []
        for t_idx, (img, cls, x1, y1, x2, y2) in enumerate(targets):
            gx, gy = (x1 + x2) / 2 / stride, (y1 + y2) / 2 / stride
            w, h = (x2 - x1) / stride, (y2 - y1) / stride
            home_i, home_j = min(int(gx), n - 1), min(int(gy), n - 1)
            for a_idx, (aw, ah) in enumerate(level_anchors[level]):
                aw, ah = aw / stride, ah / stride
                if not max(w / aw, aw / w, h / ah, ah / h) < anchor_t:
                    continue
                for row in range(n):
                    for col in range(n):
                        home = (col, row) == (home_i, home_j)
                        # neighbour across the nearer cell edge, closer than half a cell
                        nx = row == home_j and abs(col - home_i) == 1 and abs(col + 0.5 - gx) < 1.0
                        ny = col == home_i and abs(row - home_j) == 1 and abs(row + 0.5 - gy) < 1.0
                        if home or nx or ny:
                            slots.append((t_idx, a_idx, row, col))
        out.append(slots)
    return out


def total_loss_reference(raws, targets, strides, level_anchors, num_classes, gains, balance, alpha):
    """Scalar double-precision transcription of the training loss.

    ``raws`` are (N, 3*(5+nc), H, W) arrays; ``targets`` rows (img, cls, x1, y1, x2, y2).
    ``gains`` = (box, obj, cls).
    """
    no = 5 + num_classes
    input_size = raws[0].shape[2] * strides[0]
    slots = assign_reference(targets, strides, level_anchors, input_size)
    box_sum = cls_sum = obj_total = 0.0
    n_box = n_cls = 0
    for level, raw in enumerate(raws):
        raw = np.asarray(raw, dtype=np.float64)
        n, _, h, w = raw.shape
        stride = strides[level]
        tobj = {}
        # assignment order: gt, anchor, then home / x neighbour / y neighbour
        level_slots = sorted(slots[level], key=lambda s: (s[0], s[1]))
        grouped = {}
        for s in level_slots:
            grouped.setdefault((s[0], s[1]), []).append(s)
        for (t_idx, a_idx), cells in grouped.items():
            img, cls, x1, y1, x2, y2 = targets[t_idx]
            gx, gy = (x1 + x2) / 2 / stride, (y1 + y2) / 2 / stride
            home = (min(int(gy), h - 1), min(int(gx), w - 1))
            cells = sorted(cells, key=lambda s: (0 if (s[2], s[3]) == home else 1 if s[2] == home[0] else 2))
            aw, ah = (v / stride for v in level_anchors[level][a_idx])
            for _, _, row, col in cells:
                t = [raw[int(img), a_idx * no + k, row, col] for k in range(no)]
                px = 2 * sigmoid(t[0]) - 0.5
                py = 2 * sigmoid(t[1]) - 0.5
                pw = (2 * sigmoid(t[2])) ** 2 * aw
                ph = (2 * sigmoid(t[3])) ** 2 * ah
                gbox = (gx - col, gy - row, (x2 - x1) / stride, (y2 - y1) / stride)
                box_sum += alpha_ciou_scalar((px, py, pw, ph), gbox, alpha)
                n_box += 1
                tobj[(int(img), a_idx, row, col)] = max(ciou_terms_scalar((px, py, pw, ph), gbox)[0], 0.0)
                for k in range(num_classes):
                    cls_sum += bce(t[5 + k], 1.0 if k == int(cls) else 0.0)
                    n_cls += 1
        acc = 0.0
        for b in range(n):
            for a in range(3):
                for row in range(h):
                    for col in range(w):
                        acc += bce(raw[b, a * no + 4, row, col], tobj.get((b, a, row, col), 0.0))
        obj_total += acc / (n * 3 * h * w) * balance[level]
    lbox = gains[0] * (box_sum / n_box if n_box else 0.0)
    lcls = gains[2] * (cls_sum / n_cls if n_cls else 0.0)
    lobj = gains[1] * obj_total
    return {"box": lbox, "obj": lobj, "cls": lcls, "total": lbox + lobj + lcls}


# ---------------------------------------------------------------- anchors

def planted_boxes(centers, per_cluster=60, jitter=0.01, seed=0) -> np.ndarray:
    """(w, h) boxes scattered multiplicatively around known centres."""
    rng = np.random.default_rng(seed)
    rows = [np.asarray(c, dtype=np.float64) * (1 + jitter * rng.uniform(-1, 1, size=(per_cluster, 2)))
            for c in centers]
    return np.concatenate(rows)


PLANTED_CENTERS = ((10, 13), (16, 30), (33, 23), (30, 61), (62, 45), (59, 119), (116, 90), (156, 198), (373, 326))
