import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shufflecanet.config import desk_config
from shufflecanet.metrics import average_precision, evaluate, match_detections, pr_curve
from shufflecanet.model import Detector
from shufflecanet.oracles import ap_reference, map_reference, match_reference
from shufflecanet.pipeline import bench
from shufflecanet.blocks import count_parameters


def test_match_examples():
    gt = np.array([[0, 0, 0, 10, 10]])
    _, tp, fn = match_detections(np.array([[0, 0, 10, 6, 0.9, 0]]), gt)
    assert tp.tolist() == [True] and fn == 0
    dets = np.array([[0, 0, 10, 9, 0.7, 0], [0, 0, 10, 10, 0.9, 0]])
    order, tp, fn = match_detections(dets, gt)
    assert order.tolist() == [1, 0] and tp.tolist() == [True, False] and fn == 0
    _, tp, fn = match_detections(np.array([[0, 0, 10, 10, 0.9, 1]]), gt)
    assert tp.tolist() == [False] and fn == 1


def test_pr_curve_examples():
    assert pr_curve([True], 1) == [(1.0, 1.0)]
    assert pr_curve([True, False, True], 2) == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]
    assert pr_curve([False, False], 3) == [(0.0, 0.0), (0.0, 0.0)]
    assert pr_curve([True], 0) == []


def test_average_precision_examples():
    assert average_precision(pr_curve([True], 1)) == 1.0
    assert abs(average_precision([(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]) - 5 / 6) < 1e-9
    assert average_precision([]) == 0.0


flags_st = st.lists(st.booleans(), max_size=30)


@given(flags_st, st.integers(0, 5))
def test_ap_matches_loop_reference_and_monotonicity(flags, extra_gt):
    n_gt = sum(flags) + extra_gt
    ap = average_precision(pr_curve(flags, n_gt))
    assert abs(ap - ap_reference(flags, n_gt)) < 1e-12
    assert 0.0 <= ap <= 1.0
    if n_gt:
        assert average_precision(pr_curve(flags + [False], n_gt)) <= ap + 1e-15
        if extra_gt:
            assert average_precision(pr_curve(flags + [True], n_gt)) >= ap - 1e-15
        curve = pr_curve(flags, n_gt)
        rec = [r for r, _ in curve]
        assert rec == sorted(rec) and all(0 <= p <= 1 for _, p in curve)


def _dataset(rng, n_img=4, nc=2):
    preds, gts = [], []
    for _ in range(n_img):
        g = []
        for _ in range(rng.integers(0, 4)):
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(5, 20, 2)
            g.append([rng.integers(0, nc), x, y, x + w, y + h])
        g = np.array(g).reshape(-1, 5)
        p = []
        for row in g:
            if rng.random() < 0.8:
                jit = rng.normal(0, 2, 4)
                p.append([*(row[1:] + jit), rng.random(), row[0] if rng.random() < 0.8 else 1 - row[0]])
        for _ in range(rng.integers(0, 3)):
            x, y = rng.uniform(0, 50, 2)
            p.append([x, y, x + 10, y + 10, rng.random(), rng.integers(0, nc)])
        preds.append(np.array(p).reshape(-1, 6))
        gts.append(g)
    return preds, gts


@given(st.integers(0, 10**6))
def test_match_matches_reference(seed):
    rng = np.random.default_rng(seed)
    preds, gts = _dataset(rng, n_img=1)
    order, tp, fn = match_detections(preds[0], gts[0])
    r_order, r_flags, r_fn = match_reference(preds[0].tolist(), gts[0].tolist())
    assert order.tolist() == r_order and tp.tolist() == r_flags and fn == r_fn


@given(st.integers(0, 10**6))
def test_evaluate_matches_reference_and_is_gt_order_invariant(seed):
    rng = np.random.default_rng(seed)
    preds, gts = _dataset(rng)
    rep = evaluate(preds, gts, 2)
    assert abs(rep.map - map_reference([p.tolist() for p in preds], [g.tolist() for g in gts], 2)) < 1e-12
    valid = [a for a in rep.ap if a is not None]
    assert rep.map == (float(np.mean(valid)) if valid else 0.0)
    assert all(0 <= a <= 1 for a in valid) and 0 <= rep.precision <= 1 and 0 <= rep.recall <= 1
    shuffled = [g[rng.permutation(len(g))] for g in gts]
    assert evaluate(preds, shuffled, 2).map == rep.map
    conf = np.array(rep.confusion)
    assert conf.shape == (3, 3) and conf[:2].sum() == sum(len(g) for g in gts)


def test_evaluate_examples():
    gts = [np.array([[0, 0, 0, 10, 10], [1, 20, 20, 30, 30]])]
    perfect = [np.array([[0, 0, 10, 10, 0.9, 0], [20, 20, 30, 30, 0.8, 1]])]
    rep = evaluate(perfect, gts, 2, ("face", "mask"))
    assert rep.ap == [1.0, 1.0] and rep.map == 1.0
    assert rep.confusion == [[1, 0, 0], [0, 1, 0], [0, 0, 0]]
    half = evaluate([perfect[0][:1]], gts, 2)
    assert half.map == 0.5 and half.confusion[1][2] == 1
    missing_class = evaluate(perfect, [gts[0][:1]], 2)
    assert missing_class.ap[1] is None and missing_class.excluded_classes == ["1"] and missing_class.map == 1.0
    with pytest.raises(ValueError):
        evaluate(perfect, gts, 1)
    with pytest.raises(ValueError):
        evaluate(perfect, gts + gts, 2)
    js = json.loads(rep.to_json())
    assert js["map"] == 1.0 and "AP-face" in rep.to_table()


def test_identity_oracle_is_exactly_one():
    rng = np.random.default_rng(1)
    _, gts = _dataset(rng, n_img=6)
    preds = [np.column_stack([g[:, 1:], np.ones(len(g)), g[:, 0]]) for g in gts]
    assert evaluate(preds, gts, 2).map == 1.0


def test_bench_report():
    model = Detector(desk_config().model)
    rep = bench(model, trials=5, warmup=1)
    assert rep.parameters == count_parameters(model) and rep.trials == 5
    assert rep.mean_ms > 0 and rep.std_ms >= 0 and rep.input_size == 64
    assert set(rep.to_dict()) >= {"mean_ms", "median_ms", "std_ms", "parameters"}
