import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shufflecanet import tensor as T
from shufflecanet.config import HeadConfig, LossConfig
from shufflecanet.losses import (alpha_ciou_loss, assign_targets, bce, ciou_loss, cxcywh_to_xyxy, iou, total_loss,
                                 xyxy_to_cxcywh)
from shufflecanet.oracles import alpha_ciou_scalar, assign_reference, ciou_terms_scalar, pixel_iou
from shufflecanet.oracles import total_loss_reference
from shufflecanet.tensor import Tape, Tensor

CONC = ([0, 0, 2, 2], [0.5, 0.5, 1.5, 1.5])


def _box(draw_like):
    return st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 40), st.floats(0.1, 40))


def test_iou_examples():
    assert iou([0, 0, 2, 2], [0, 0, 2, 2], fmt="xyxy") == 1.0
    assert iou([0, 0, 1, 1], [2, 2, 3, 3], fmt="xyxy") == 0.0
    assert abs(iou([0, 0, 2, 2], [1, 1, 3, 3], fmt="xyxy") - 1 / 7) < 1e-15
    assert abs(pixel_iou((0, 0, 2, 2), (1, 1, 3, 3)) - 1 / 7) < 1e-15


def test_ciou_examples():
    assert ciou_loss([1, 2, 3, 4], [1, 2, 3, 4]) == 0.0
    assert alpha_ciou_loss([1, 2, 3, 4], [1, 2, 3, 4], 3.0) == 0.0
    assert abs(ciou_loss(*CONC, fmt="xyxy") - 0.75) < 1e-9
    assert abs(alpha_ciou_loss(*CONC, alpha=3.0, fmt="xyxy") - 0.984375) < 1e-9
    with pytest.raises(ValueError):
        alpha_ciou_loss(*CONC, alpha=0.0)


@given(_box(None), _box(None))
def test_alpha_one_is_ciou_and_scalar_oracle(p, g):
    a = alpha_ciou_loss(p, g, 1.0)
    c = ciou_loss(p, g)
    assert abs(a - c) <= 1e-12
    assert abs(c - alpha_ciou_scalar(p, g, 1.0)) <= 1e-9
    assert abs(alpha_ciou_loss(p, g, 3.0) - alpha_ciou_scalar(p, g, 3.0)) <= 1e-9
    assert c >= 0


@given(_box(None), _box(None), st.floats(-20, 20), st.floats(-20, 20), st.floats(0.2, 5))
def test_iou_symmetry_translation_scale(p, g, dx, dy, s):
    v = iou(p, g)
    assert 0.0 <= v <= 1.0
    assert abs(v - iou(g, p)) < 1e-12
    shift = lambda b: (b[0] + dx, b[1] + dy, b[2], b[3])   # noqa: E731
    scale = lambda b: tuple(x * s for x in b)               # noqa: E731
    assert abs(v - iou(shift(p), shift(g))) < 1e-9
    assert abs(v - iou(scale(p), scale(g))) < 1e-9


@given(st.floats(1, 20), st.floats(1, 20), st.floats(0.3, 3))
def test_same_aspect_has_no_v_term(w, h, k):
    _, _, v = ciou_terms_scalar((0, 0, w, h), (1, 1, w * k, h * k))
    assert v < 1e-15


@given(st.lists(st.integers(0, 30), min_size=8, max_size=8))
def test_iou_pixel_grid_exact(c):
    a = (min(c[0], c[2]), min(c[1], c[3]), max(c[0], c[2]) + 1, max(c[1], c[3]) + 1)
    b = (min(c[4], c[6]), min(c[5], c[7]), max(c[4], c[6]) + 1, max(c[5], c[7]) + 1)
    assert iou(a, b, fmt="xyxy") == pixel_iou(a, b)


def test_box_format_roundtrip(rng):
    b = np.column_stack([rng.uniform(0, 10, (5, 2)), rng.uniform(1, 5, (5, 2))])
    np.testing.assert_allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(b)), b, atol=1e-12)
    with pytest.raises(ValueError):
        iou(b, b, fmt="xywh")


def test_bce_examples(rng):
    assert abs(bce(0.0, 0.5) - math.log(2)) < 1e-12
    assert bce(40.0, 1.0) < 1e-15 and bce(-1000.0, 0.0) == 0.0 and math.isfinite(bce(1000.0, 0.0))
    z, t = rng.uniform(-20, 20, 200), rng.uniform(0, 1, 200)
    sig = 1 / (1 + np.exp(-z.astype(np.longdouble)))
    direct = -(t * np.log(sig) + (1 - t) * np.log1p(-sig))
    np.testing.assert_allclose(bce(z, t), direct.astype(np.float64), rtol=1e-9)
    tz = Tensor(z)
    np.testing.assert_allclose(bce(tz, t).data, bce(z, t))


def test_tensor_path_matches_plain(rng):
    p = np.column_stack([rng.uniform(0, 5, (6, 2)), rng.uniform(0.5, 3, (6, 2))])
    g = np.column_stack([rng.uniform(0, 5, (6, 2)), rng.uniform(0.5, 3, (6, 2))])
    np.testing.assert_array_equal(alpha_ciou_loss(Tensor(p), g).data, alpha_ciou_loss(p, g))


HEAD = HeadConfig(num_classes=2, anchors=tuple((w / 10, h / 10) for w, h in HeadConfig().anchors))


def test_assign_examples():
    # GT equal to anchor (1.0, 1.3) centred in cell (2, 2) of the stride-8 level
    t = np.array([[0, 1, 20 - 0.5, 20 - 0.65, 20 + 0.5, 20 + 0.65]])
    ts = assign_targets(t, HEAD, 64)
    lv = ts.levels[0]
    assert 0 in lv.a[(lv.gi == 2) & (lv.gj == 2)]
    assert (lv.cls == 1).all() and len(ts) == sum(len(x) for x in ts.levels)
    # w five times the anchor width: ratio 5 >= 4 rejects that anchor
    wide = np.array([[0, 0, 20 - 2.5, 20 - 0.65, 20 + 2.5, 20 + 0.65]])
    lv = assign_targets(wide, HeadConfig(num_classes=2, anchors=((1.0, 1.3),) * 9), 64).levels[0]
    assert len(lv) == 0
    with pytest.raises(ValueError, match="outside"):
        assign_targets(np.array([[0, 0, 10, 10, 70, 20]]), HEAD, 64)


def _random_targets(rng, n, size=64, images=2):
    xy = rng.uniform(0, size - 12, (n, 2))
    wh = rng.uniform(1.5, 12, (n, 2))
    return np.column_stack([rng.integers(0, images, n), rng.integers(0, 2, n), xy, xy + wh])


@given(st.integers(0, 10**6), st.integers(0, 6))
def test_assign_matches_exhaustive_reference(seed, n):
    t = _random_targets(np.random.default_rng(seed), n)
    ts = assign_targets(t, HEAD, 64)
    ref = assign_reference(t, HEAD.strides, [HEAD.level_anchors(i) for i in range(3)], 64)
    for lv, slots in zip(ts.levels, ref):
        got = sorted(zip(lv.gt_index.tolist(), lv.a.tolist(), lv.gj.tolist(), lv.gi.tolist()))
        assert got == sorted(slots)


@given(st.integers(0, 10**6))
def test_assign_permutation_covariant(seed):
    rng = np.random.default_rng(seed)
    t = _random_targets(rng, 5)
    perm = rng.permutation(5)
    a, b = assign_targets(t, HEAD, 64), assign_targets(t[perm], HEAD, 64)
    for la, lb in zip(a.levels, b.levels):
        ka = sorted(zip(la.gt_index.tolist(), la.a.tolist(), la.gj.tolist(), la.gi.tolist()))
        kb = sorted(zip(perm[lb.gt_index].tolist(), lb.a.tolist(), lb.gj.tolist(), lb.gi.tolist()))
        assert ka == kb
    again = assign_targets(t, HEAD, 64)
    assert all((x.gt_index == y.gt_index).all() and (x.gi == y.gi).all() for x, y in zip(a.levels, again.levels))


def _raws(rng, n=2, scale=1.0):
    return [rng.standard_normal((n, 21, s, s)) * scale for s in (8, 4, 2)]


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("alpha", [1.0, 3.0])
def test_total_loss_matches_scalar_reference(seed, alpha):
    rng = np.random.default_rng(seed)
    raws = _raws(rng)
    t = _random_targets(rng, 1 + seed % 4)
    cfg = LossConfig(kind="alpha-ciou" if alpha != 1.0 else "ciou", alpha=alpha)
    _, comps = total_loss([Tensor(r) for r in raws], assign_targets(t, HEAD, 64), cfg, 2)
    ref = total_loss_reference(raws, [tuple(r) for r in t], HEAD.strides, [HEAD.level_anchors(i) for i in range(3)],
                               2, (cfg.box_gain, cfg.obj_gain, cfg.cls_gain), cfg.balance, alpha)
    for k in ("box", "obj", "cls", "total"):
        assert abs(comps[k] - ref[k]) <= 1e-6 * max(1.0, abs(ref[k])), k


def test_total_loss_without_targets_goes_to_zero(rng):
    raws = [Tensor(np.full((1, 21, s, s), -40.0)) for s in (8, 4, 2)]
    loss, comps = total_loss(raws, assign_targets(np.zeros((0, 6)), HEAD, 64), LossConfig(), 2)
    assert comps["box"] == comps["cls"] == 0.0 and 0 <= comps["total"] < 1e-15


def test_perfect_decode_has_zero_box_term():
    # GT centred in a cell with the anchor's size; logits of 0 decode to offset 0.5 and scale 1
    anchors = ((8.0, 8.0),) * 9
    head = HeadConfig(num_classes=2, anchors=anchors)
    t = np.array([[0, 0, 12 - 4, 12 - 4, 12 + 4, 12 + 4]])
    ts = assign_targets(t, head, 64)
    raws = [Tensor(np.zeros((1, 21, s, s))) for s in (8, 4, 2)]
    ts.levels = [ts.levels[0]] + [lv for lv in ts.levels[1:]]
    lv = ts.levels[0]
    home = (lv.gi == 1) & (lv.gj == 1)
    for k in ("b", "a", "gj", "gi", "tbox", "cls", "gt_index", "anchors"):
        setattr(lv, k, getattr(lv, k)[home])
    for i in (1, 2):
        ts.levels[i] = type(lv)(*(getattr(lv, k)[:0] for k in ("b", "a", "gj", "gi", "tbox", "cls", "gt_index",
                                                                 "anchors")))
    _, comps = total_loss(raws, ts, LossConfig(), 2)
    assert abs(comps["box"]) < 1e-12


def test_total_loss_gradients_reach_logits(rng):
    raws = [Tensor(r, requires_grad=True) for r in _raws(rng, n=1)]
    t = _random_targets(rng, 3, images=1)
    with Tape() as tape:
        loss, _ = total_loss(raws, assign_targets(t, HEAD, 64), LossConfig(), 2)
    g = tape.backward(loss)
    assert all(np.abs(g[r]).sum() > 0 for r in raws)


def test_total_loss_decreases_under_descent(rng):
    raws = [Tensor(r * 0.1, requires_grad=True) for r in _raws(rng, n=1)]
    ts = assign_targets(_random_targets(rng, 3, images=1), HEAD, 64)
    history = []
    for _ in range(150):
        with Tape() as tape:
            loss, comps = total_loss(raws, ts, LossConfig(box_gain=1.0), 2)
        g = tape.backward(loss)
        history.append(comps["total"])
        for r in raws:
            r.data -= 2.0 * g[r]
    assert all(v >= 0 for v in history)
    windows = [np.mean(history[i:i + 50]) for i in range(0, 150, 50)]
    assert windows[0] > windows[1] > windows[2]
