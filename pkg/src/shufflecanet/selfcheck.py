"""Gradient suite and quick oracle checks, shared by the CLI and the tests."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracles
from . import tensor as T
from .blocks import CBS, Backbone, CoordAttention, ShuffleUnit
from .config import BackboneConfig, BiFPNConfig, CBSConfig, CoordAttConfig, ShuffleUnitConfig
from .gradcheck import gradcheck
from .losses import _beta, _terms, alpha_ciou_loss, ciou_loss
from .neck import BiFPNLayer
from .tensor import Tensor

GRAD_TOL = 1e-4


@dataclass
class Check:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail}"


def _t(rng, *shape, lo=None, hi=None):
    if lo is not None:
        return Tensor(rng.uniform(lo, hi, size=shape))
    return Tensor(rng.standard_normal(shape))


def _away(rng, shape, kinks, margin=0.1, scale=2.0):
    """Normal samples nudged off every kink by at least ``margin``."""
    x = rng.standard_normal(shape) * scale
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.where(x[near] >= k, margin, -margin) * 2
    return Tensor(x)


def _spaced(rng, shape):
    """Distinct values at least 0.05 apart, so max-pooling has no ties."""
    n = int(np.prod(shape))
    return Tensor((rng.permutation(n) * 0.05 - n * 0.025).reshape(shape))


def _model64(module, rng=None):
    """float64 copy of a block. With ``rng`` the BatchNorms run in eval mode on
    random running statistics; in training mode a BN beta feeding conv -> BN has
    an exactly-zero gradient that the relative-error floor cannot score."""
    module.astype(np.float64)
    if rng is None:
        return module.train()
    for name, buf in module.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, buf.shape) if name.endswith("running_var") else rng.normal(0, 0.3, buf.shape)
    return module.eval()


def _frozen_beta_loss(gt, alpha):
    """alpha-CIoU with the trade-off weight pinned at the base point, the function the tape differentiates."""
    cache = {}

    def fn(p):
        iou_, dist, v = _terms(p, gt)
        if "beta" not in cache:
            cache["beta"] = _beta(iou_, v)
        return 1.0 - iou_ ** alpha + dist ** alpha + (cache["beta"] * v) ** alpha

    return fn


def gradient_cases(seed: int = 0) -> list[tuple[str, Callable[[], float], float]]:
    """(name, thunk returning max relative error, tolerance)."""
    rng = np.random.default_rng(seed)
    cases = []

    def add(name, fn, inputs, tol=GRAD_TOL, max_elems=48):
        cases.append((name, lambda: gradcheck(fn, inputs, seed=seed, max_elems=max_elems), tol))

    a, b = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 4, 4)
    pos = _t(rng, 2, 3, 4, 4, lo=0.5, hi=2.0)
    add("add", lambda x, y: x + y, [a, b])
    add("sub", lambda x, y: x - y, [a, b])
    add("mul", lambda x, y: x * y, [a, b])
    add("div", lambda x, y: x / y, [a, pos])
    add("power", lambda x: T.power(x, 2.5), [pos])
    add("exp", T.exp, [a])
    add("log", T.log, [pos])
    add("arctan", T.arctan, [a])
    gap = Tensor(a.data + np.sign(a.data - b.data + 1e-12) * 0.2)
    add("minimum", T.minimum, [gap, b])
    add("maximum", T.maximum, [gap, b])
    add("clamp_min", lambda x: T.clamp_min(x, 0.3), [_away(rng, (2, 3, 4, 4), [0.3])])
    add("relu", T.relu, [_away(rng, (2, 3, 4, 4), [0.0])])
    add("sigmoid", T.sigmoid, [a], tol=1e-7)
    add("silu", T.silu, [a])
    add("hardswish", T.hardswish, [_away(rng, (2, 3, 4, 4), [-3.0, 3.0])])
    tgt = rng.uniform(0, 1, size=(2, 3, 4, 4))
    add("bce_with_logits", lambda z: T.bce_with_logits(z, tgt), [a])
    add("getitem", lambda x: x[:, 1:, ::2, 1], [a])
    add("reshape", lambda x: T.reshape(x, (6, 16)), [a])
    add("sum", lambda x: T.tsum(x, axis=(0, 2)), [a])
    add("mean", lambda x: T.tmean(x, axis=1, keepdims=True), [a])
    c2 = _t(rng, 2, 2, 4, 4)
    add("concat", lambda x, y: T.concat([x, y], axis=1), [a, c2])
    add("split", lambda x: T.split(x, [1, 2], axis=1)[1] * 2.0 + T.split(x, [1, 2], axis=1)[0], [a])
    s6 = _t(rng, 1, 6, 3, 3)
    add("channel_shuffle", lambda x: T.channel_shuffle(x, 2), [s6])
    add("pool_h", T.pool_h, [a])
    add("pool_w", T.pool_w, [a])
    add("transpose_hw", T.transpose_hw, [_t(rng, 1, 2, 3, 5)])
    add("upsample_nearest2x", T.upsample_nearest2x, [a])
    add("maxpool2x2", T.maxpool2x2, [_spaced(rng, (2, 3, 4, 4))])
    x = _t(rng, 2, 4, 7, 7)
    add("conv2d dense", lambda x_, w_, b_: T.conv2d(x_, w_, b_, 2, 1), [x, _t(rng, 6, 4, 3, 3), _t(rng, 6)],
        tol=1e-6)
    add("conv2d depthwise k5", lambda x_, w_: T.conv2d(x_, w_, None, 1, 2, groups=4), [x, _t(rng, 4, 1, 5, 5)],
        tol=1e-6)
    add("conv2d grouped", lambda x_, w_: T.conv2d(x_, w_, None, 1, 1, groups=2), [x, _t(rng, 6, 2, 3, 3)],
        tol=1e-6)
    g, be = _t(rng, 4, lo=0.5, hi=1.5), _t(rng, 4)
    add("batchnorm2d train", lambda x_, g_, b_: T.batchnorm2d(x_, g_, b_, np.zeros(4), np.ones(4), True),
        [x, g, be], tol=1e-5)
    rm, rv = rng.standard_normal(4), rng.uniform(0.5, 2, 4)
    add("batchnorm2d eval", lambda x_, g_, b_: T.batchnorm2d(x_, g_, b_, rm, rv, False), [x, g, be])
    add("sigmoid chain", lambda x_: T.sigmoid(T.sigmoid(T.sigmoid(x_)) * 3.0), [a], tol=1e-7)

    # composed blocks in float64
    cbs = _model64(CBS(CBSConfig(3, 8, 3, 2), rng))
    xi = _t(rng, 2, 3, 8, 8)
    add("CBS", lambda x_, *_: cbs(x_), [xi, *cbs.parameters()], max_elems=24)
    su1 = _model64(ShuffleUnit(ShuffleUnitConfig(8, 8, 1), rng), rng)
    x8 = _t(rng, 2, 8, 6, 6)
    add("shuffle unit stride 1", lambda x_, *_: su1(x_), [x8, *su1.parameters()], max_elems=16)
    su2 = _model64(ShuffleUnit(ShuffleUnitConfig(8, 16, 2), rng), rng)
    add("shuffle unit stride 2", lambda x_, *_: su2(x_), [x8, *su2.parameters()], max_elems=16)
    ca = _model64(CoordAttention(CoordAttConfig(8), rng), rng)
    add("CoordAttention", lambda x_, *_: ca(x_), [_t(rng, 2, 8, 4, 5), *ca.parameters()], max_elems=16)
    composite = [_model64(CBS(CBSConfig(3, 8, 3, 1), rng), rng),
                 _model64(ShuffleUnit(ShuffleUnitConfig(8, 8, 1), rng), rng)]
    add("CBS -> shuffle unit -> pooled sum",
        lambda x_, *_: T.tsum(T.pool_h(composite[1](composite[0](x_))), axis=(2, 3)),
        [_t(rng, 2, 3, 6, 6), *composite[0].parameters(), *composite[1].parameters()], max_elems=16)
    bcfg = BiFPNConfig(neck_channels=4)
    layer = _model64(BiFPNLayer(bcfg, rng), rng)
    c1, c2_, c3 = _t(rng, 2, 4, 8, 8), _t(rng, 2, 4, 4, 4), _t(rng, 2, 4, 2, 2)
    add("BiFPN repeat", lambda p, q, r, *_: T.concat([T.reshape(o, (-1,)) for o in layer(p, q, r)], axis=0),
        [c1, c2_, c3, *layer.parameters()], max_elems=12)
    one_stage = _model64(Backbone(BackboneConfig(stem_channels=(4, 8), stage_channels=(8, 8, 8),
                                                 stage_repeats=(1, 1, 1)), rng), rng)
    add("backbone (attention on)", lambda x_, *_: T.concat([T.reshape(o, (-1,)) for o in one_stage(x_)], axis=0),
        [_t(rng, 2, 3, 32, 32), *one_stage.parameters()], max_elems=6)

    # training-mode BatchNorm through whole blocks, checked on the input gradient
    su_train = _model64(ShuffleUnit(ShuffleUnitConfig(8, 16, 2), rng))
    add("shuffle unit stride 2, train-mode BN (input)", su_train, [_t(rng, 2, 8, 6, 6)], max_elems=24)
    bb_train = _model64(Backbone(BackboneConfig(stem_channels=(4, 8), stage_channels=(8, 8, 8),
                                                stage_repeats=(1, 1, 1)), rng))
    add("backbone, train-mode BN (input)",
        lambda x_: T.concat([T.reshape(o, (-1,)) for o in bb_train(x_)], axis=0), [_t(rng, 2, 3, 32, 32)],
        max_elems=12)

    pred = Tensor(np.column_stack([rng.uniform(2, 8, 6), rng.uniform(2, 8, 6), rng.uniform(1, 4, 6),
                                   rng.uniform(1, 4, 6)]))
    gt = Tensor(np.column_stack([rng.uniform(2, 8, 6), rng.uniform(2, 8, 6), rng.uniform(1, 4, 6),
                                 rng.uniform(1, 4, 6)]))
    add("alpha-CIoU (beta held constant)", _frozen_beta_loss(gt, 3.0), [pred], max_elems=None)
    add("CIoU (beta held constant)", _frozen_beta_loss(gt, 1.0), [pred], max_elems=None)
    # sanity: the frozen-beta function is what alpha_ciou_loss evaluates
    assert np.allclose(_frozen_beta_loss(gt, 3.0)(pred).data, alpha_ciou_loss(pred, gt, 3.0).data)
    return cases


def run_gradient_suite(seed: int = 0) -> list[Check]:
    out = []
    for name, thunk, tol in gradient_cases(seed):
        err = thunk()
        out.append(Check(f"grad {name}", err <= tol, f"max rel err {err:.2e} (tol {tol:.0e})"))
    return out


def run_oracle_suite(seed: int = 0) -> list[Check]:
    """Fast versions of the worked examples and brute-force cross-checks."""
    from .anchors import kmeans_anchors
    from .config import desk_config
    from .data import letterbox_geometry, letterbox_boxes, unletterbox_boxes
    from .head import nms
    from .losses import iou
    from .metrics import average_precision, pr_curve
    from .model import Detector
    from .pipeline import detect

    rng = np.random.default_rng(seed)
    out = []

    def check(name, ok, detail=""):
        out.append(Check(name, bool(ok), detail or ("ok" if ok else "mismatch")))

    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 1, 5, 5))
    got = T.conv2d(Tensor(x), Tensor(w), None, 2, 2, groups=2).data
    check("depthwise conv vs loop oracle", np.array_equal(got, oracles.naive_conv2d(x, w, None, 2, 2, 2)))
    perm = T.channel_shuffle(Tensor(np.arange(6.0).reshape(1, 6, 1, 1)), 2).data.ravel().tolist()
    check("channel_shuffle C=6 g=2", perm == [0, 3, 1, 4, 2, 5], str(perm))

    concentric = ciou_loss([0, 0, 2, 2], [0.5, 0.5, 1.5, 1.5], fmt="xyxy")
    check("CIoU concentric = 0.75", abs(concentric - 0.75) < 1e-9, f"{concentric!r}")
    a3 = alpha_ciou_loss([0, 0, 2, 2], [0.5, 0.5, 1.5, 1.5], 3.0, fmt="xyxy")
    check("alpha-CIoU concentric = 0.984375", abs(a3 - 0.984375) < 1e-9, f"{a3!r}")
    p = np.column_stack([rng.uniform(0, 10, 200), rng.uniform(0, 10, 200), rng.uniform(0.5, 5, 200),
                         rng.uniform(0.5, 5, 200)])
    g = np.column_stack([rng.uniform(0, 10, 200), rng.uniform(0, 10, 200), rng.uniform(0.5, 5, 200),
                         rng.uniform(0.5, 5, 200)])
    diff = np.max(np.abs(alpha_ciou_loss(p, g, 1.0) - ciou_loss(p, g)))
    check("alpha=1 reduces to CIoU", diff <= 1e-12, f"max diff {diff:.1e}")
    boxes = rng.integers(0, 12, size=(100, 2, 2))
    bad = 0
    for pair in boxes:
        x1, y1 = pair[0]
        a_box = (int(x1), int(y1), int(x1) + int(rng.integers(1, 6)), int(y1) + int(rng.integers(1, 6)))
        x2, y2 = pair[1]
        b_box = (int(x2), int(y2), int(x2) + int(rng.integers(1, 6)), int(y2) + int(rng.integers(1, 6)))
        bad += iou(a_box, b_box, fmt="xyxy") != oracles.pixel_iou(a_box, b_box)
    check("IoU vs pixel counting", bad == 0, f"{bad} mismatches")

    ap = average_precision(pr_curve([True, False, True], 2))
    check("AP hand walk = 5/6", abs(ap - 5 / 6) < 1e-9, f"{ap!r}")

    bad = 0
    for _ in range(100):
        n = int(rng.integers(1, 12))
        xy = rng.uniform(0, 20, size=(n, 2))
        rows = np.column_stack([xy, xy + rng.uniform(2, 10, size=(n, 2)), rng.integers(1, 6, n) / 5.0,
                                rng.integers(0, 2, n)])
        kept = nms(rows, 0.45)
        ref = rows[oracles.nms_reference(rows, 0.45)]
        ref = ref[np.lexsort((ref[:, 5], ref[:, 1], ref[:, 0], -ref[:, 4]))]
        bad += not np.array_equal(kept, ref)
    check("NMS vs reference suppressor", bad == 0, f"{bad} mismatches in 100")

    planted = oracles.planted_boxes(oracles.PLANTED_CENTERS, seed=seed)
    got = np.array(kmeans_anchors(planted, 9, seed=seed).anchors)
    rel = np.max(np.abs(got - np.array(oracles.PLANTED_CENTERS)) / np.array(oracles.PLANTED_CENTERS))
    check("k-means planted recovery", rel <= 0.02, f"max rel err {rel:.4f}")

    worst = 0.0
    for _ in range(200):
        wd, ht = (int(v) for v in rng.integers(1, 2000, 2))
        meta, _, _ = letterbox_geometry(wd, ht, 640)
        xs, ys = np.sort(rng.uniform(0, wd, (4, 2)), axis=1), np.sort(rng.uniform(0, ht, (4, 2)), axis=1)
        bx = np.column_stack([xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]])
        back = unletterbox_boxes(letterbox_boxes(bx, meta), meta)
        worst = max(worst, float(np.max(np.abs(back - bx))))
    check("letterbox round trip", worst <= 0.5, f"max error {worst:.2e} px")

    cfg = desk_config(2)
    model = Detector(cfg.model, seed=seed)
    gray = np.full((48, 80, 3), 114, np.uint8)
    dets = detect(model, [gray], conf_threshold=0.99)
    check("random-init model on blank image, conf 0.99", len(dets[0]) == 0, f"{len(dets[0])} detections")
    all_scores = detect(model, [gray, rng.integers(0, 256, (64, 64, 3)).astype(np.uint8)], conf_threshold=0.0)
    top = max(float(d[:, 4].max()) for d in all_scores)
    check("random-init scores bounded", top < 0.99, f"max score {top:.3f}")
    return out


def run_all(seed: int = 0, gradients: bool = True) -> list[Check]:
    checks = run_oracle_suite(seed)
    if gradients:
        checks += run_gradient_suite(seed)
    return checks
