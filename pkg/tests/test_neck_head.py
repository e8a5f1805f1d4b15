import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from shufflecanet import tensor as T
from shufflecanet.config import BiFPNConfig, HeadConfig
from shufflecanet.head import Head, LetterboxMeta, box_iou, decode, nms, to_detections, unletterbox
from shufflecanet.neck import BiFPN, BiFPNLayer, fuse_node, fusion_coefficients
from shufflecanet.nn import Identity, Module
from shufflecanet.oracles import corner_iou, nms_reference, nms_subsets, sigmoid
from shufflecanet.tensor import Parameter, Tape, Tensor


def _levels(rng, chans=(64, 128, 256), s=8, n=1):
    return [Tensor(rng.standard_normal((n, c, s >> i, s >> i)).astype(np.float32)) for i, c in enumerate(chans)]


def test_bifpn_shapes(rng):
    neck = BiFPN((64, 128, 256), BiFPNConfig(neck_channels=64))
    outs = neck(*_levels(rng))
    assert [o.shape for o in outs] == [(1, 64, 8, 8), (1, 64, 4, 4), (1, 64, 2, 2)]


def test_bifpn_rejects_bad_strides(rng):
    neck = BiFPN((64, 128, 256), BiFPNConfig(neck_channels=64))
    c1, c2, _ = _levels(rng)
    with pytest.raises(ValueError, match="strides"):
        neck(c1, c2, Tensor(np.zeros((1, 256, 4, 4), np.float32)))


def test_bifpn_repeats_apply_again(rng):
    x = _levels(rng)
    one = BiFPN((64, 128, 256), BiFPNConfig(neck_channels=64, repeats=1), np.random.default_rng(1))
    two = BiFPN((64, 128, 256), BiFPNConfig(neck_channels=64, repeats=2), np.random.default_rng(1))
    assert len(two.layers) == 2 and len(two.graph()) == 2
    assert not np.array_equal(one(*x)[0].data, two(*x)[0].data)


class _Pool(Module):
    def forward(self, x):
        return T.maxpool2x2(x)


@pytest.mark.parametrize("skip,expected", [(True, ((1, 1, 1), (1, 3, 2), (1, 3, 3))),
                                           (False, ((1, 1, 1), (1, 2, 2), (1, 2, 3)))])
def test_plain_sum_hand_trace(skip, expected):
    layer = BiFPNLayer(BiFPNConfig(neck_channels=1, fusion_mode="plain-sum", skip_edges=skip))
    for node in (layer.m2, layer.p1, layer.p2, layer.p3):
        node.conv = Identity()
    layer.down1 = layer.down2 = _Pool()
    a, b, c = 1.0, 10.0, 100.0
    outs = layer(Tensor(np.full((1, 1, 4, 4), a)), Tensor(np.full((1, 1, 2, 2), b)), Tensor(np.full((1, 1, 1, 1), c)))
    # P1 = a + b + c; P2 and P3 per the DAG with and without the C2 skip edge
    for out, (ka, kb, kc) in zip(outs, expected):
        assert np.all(out.data == ka * a + kb * b + kc * c)


def test_graph_structure():
    bifpn = BiFPN((8, 8, 8), BiFPNConfig(neck_channels=8))
    panet = BiFPN((8, 8, 8), BiFPNConfig(neck_channels=8, fusion_mode="plain-sum", skip_edges=False))
    g_b, g_p = bifpn.graph()[0], panet.graph()[0]
    assert set(g_b) == set(g_p) == {"M2", "P1", "P2", "P3"}
    assert sum(map(len, g_b.values())) == 9 and sum(map(len, g_p.values())) == 8
    assert "C2" not in g_p["P2"]
    assert panet.layers[0].p2.weights is None and bifpn.layers[0].p2.weights.shape == (3,)


def test_fuse_node_examples(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)))
    w = 0.7
    out = fuse_node([x, x], Tensor(np.array([w, w])), epsilon=1e-4)
    np.testing.assert_allclose(out.data, x.data * (2 * w / (2 * w + 1e-4)))
    y = Tensor(rng.standard_normal((1, 2, 3, 3)))
    gated = fuse_node([x, y], Tensor(np.array([1.0, -50.0])), epsilon=1e-4)
    np.testing.assert_allclose(gated.data, x.data / (1 + 1e-4))
    with pytest.raises(ValueError):
        fuse_node([], None)
    with pytest.raises(ValueError):
        fuse_node([x, Tensor(np.zeros((1, 2, 2, 2)))], Tensor(np.ones(2)))
    with pytest.raises(ValueError):
        fuse_node([x, y], Tensor(np.ones(3)))


def test_fuse_node_elementwise_oracle(rng):
    xs = [rng.standard_normal((2, 3, 2, 2)) for _ in range(3)]
    w = rng.standard_normal(3)
    out = fuse_node([Tensor(v) for v in xs], Tensor(w)).data
    rw = [max(v, 0.0) for v in w]
    for idx in np.ndindex(out.shape):
        ref = sum(rw[i] * xs[i][idx] for i in range(3)) / (sum(rw) + 1e-4)
        assert abs(out[idx] - ref) < 1e-12


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=5))
def test_fusion_coefficients_bounds(ws):
    c = fusion_coefficients(np.array(ws))
    assert ((c >= 0) & (c <= 1)).all() and c.sum() <= 1
    if any(w > 0 for w in ws):
        assert c.sum() > 0
    eq = fusion_coefficients(np.full(len(ws), 2.5))
    assert np.allclose(eq, eq[0])


def test_head_channels_zero_and_grad(rng):
    head = Head(16, HeadConfig(num_classes=2), input_size=64, rng=rng)
    ps = [Tensor(rng.standard_normal((1, 16, s, s)).astype(np.float64), requires_grad=True) for s in (8, 4, 2)]
    head.astype(np.float64)
    with Tape() as tape:
        raws = head(*ps)
        loss = sum((T.tsum(r * r) for r in raws), Tensor(np.array(0.0)))
    assert [r.shape[1] for r in raws] == [21, 21, 21]
    g = tape.backward(loss)
    assert all(np.abs(g[p]).sum() > 0 for p in ps)
    for conv in head.convs:
        conv.weight.data[...] = 0
        conv.bias.data[...] = 0
    assert all((r.data == 0).all() for r in head(*ps))


def test_decode_zero_logits_example():
    cfg = HeadConfig(num_classes=1)
    raw = np.zeros((1, 3 * 6, 1, 1))
    rows = decode([raw], cfg, conf_threshold=0.0)[0]
    np.testing.assert_allclose(rows[0], [4 - 5, 4 - 6.5, 4 + 5, 4 + 6.5, 0.25, 0])
    raw[0, 4] = -1e4
    assert len(decode([raw], cfg, conf_threshold=1e-9)[0]) == 2


def test_decode_matches_scalar_formula(rng):
    cfg = HeadConfig(num_classes=2)
    raws = [rng.standard_normal((2, 21, s, s)) for s in (4, 2, 1)]
    got = decode(raws, cfg, conf_threshold=0.0)
    for img in range(2):
        expect = []
        for level, raw in enumerate(raws):
            stride = cfg.strides[level]
            for a, (aw, ah) in enumerate(cfg.level_anchors(level)):
                for i in range(raw.shape[2]):
                    for j in range(raw.shape[3]):
                        t = raw[img, a * 7:(a + 1) * 7, i, j]
                        cx = (2 * sigmoid(t[0]) - 0.5 + j) * stride
                        cy = (2 * sigmoid(t[1]) - 0.5 + i) * stride
                        w, h = (2 * sigmoid(t[2])) ** 2 * aw, (2 * sigmoid(t[3])) ** 2 * ah
                        sc = [sigmoid(t[4]) * sigmoid(t[5 + k]) for k in range(2)]
                        k = int(np.argmax(sc))
                        expect.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, sc[k], k))
        np.testing.assert_allclose(got[img], np.array(expect), rtol=1e-12, atol=1e-12)


@given(st.integers(0, 1000), st.floats(0.0, 5.0))
def test_decode_monotone_in_objectness(seed, bump):
    rng = np.random.default_rng(seed)
    cfg = HeadConfig(num_classes=2)
    raw = rng.standard_normal((1, 21, 2, 2))
    before = decode([raw], cfg, 0.0)[0][:, 4]
    raw[:, [4, 11, 18]] += bump
    after = decode([raw], cfg, 0.0)[0][:, 4]
    assert (after >= before).all()


def test_nms_examples():
    box = [10, 10, 50, 50]
    out = nms(np.array([box + [0.8, 0], box + [0.9, 0]]), 0.45)
    assert out.tolist() == [box + [0.9, 0]]
    assert len(nms(np.array([box + [0.8, 0], box + [0.9, 1]]), 0.45)) == 2
    assert nms(np.zeros((0, 6)), 0.45).shape == (0, 6)
    dets = to_detections(out)
    assert dets[0].class_id == 0 and dets[0].score == 0.9 and dets[0].box == (10, 10, 50, 50)


def _random_rows(rng, n, classes=2, grid=None):
    xy = rng.uniform(0, 80, (n, 2)) if grid is None else rng.integers(0, grid, (n, 2)).astype(float)
    wh = rng.uniform(5, 40, (n, 2)) if grid is None else rng.integers(1, grid, (n, 2)).astype(float)
    score = rng.uniform(0, 1, n) if grid is None else rng.integers(1, 4, n) / 4
    return np.column_stack([xy, xy + wh, score, rng.integers(0, classes, n)])


@example(635655, 4, 0.3)   # two rows tied on score, x1, y1 and class
@given(st.integers(0, 10**6), st.integers(0, 20), st.sampled_from([0.3, 0.45, 0.7]))
def test_nms_matches_references(seed, n, thr):
    rng = np.random.default_rng(seed)
    rows = _random_rows(rng, n, grid=8 if seed % 2 else None)   # odd seeds force score and corner ties
    out = nms(rows, thr)
    ref = nms_reference(rows, thr)
    np.testing.assert_array_equal(out, rows[ref].reshape(-1, 6))
    if n <= 8:
        assert sorted(nms_subsets(rows, thr)) == sorted(ref)
    # subset, sorted by score, no same-class overlap above the threshold
    assert all(any((r == q).all() for q in rows) for r in out)
    assert (np.diff(out[:, 4]) <= 0).all()
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            if out[i, 5] == out[j, 5]:
                assert corner_iou(out[i, :4], out[j, :4]) <= thr


def test_box_iou_matches_scalar(rng):
    a, b = _random_rows(rng, 6)[:, :4], _random_rows(rng, 5)[:, :4]
    m = box_iou(a, b)
    for i in range(6):
        for j in range(5):
            assert abs(m[i, j] - corner_iou(a[i], b[j])) < 1e-12


def test_unletterbox_examples():
    rows = np.array([[3.0, 4.0, 100.0, 200.0, 0.5, 1]])
    np.testing.assert_array_equal(unletterbox(rows, LetterboxMeta(1.0, 0, 0, 640, 640, 640)), rows)
    meta = LetterboxMeta(0.5, 0, 140, 640, 1280, 720)
    out = unletterbox(np.array([[0, 140, 640, 500, 0.9, 0]]), meta)
    np.testing.assert_allclose(out[0, :4], [0, 0, 1280, 720])
    clamped = unletterbox(np.array([[-10, 100, 700, 560, 0.9, 0]]), meta)
    np.testing.assert_allclose(clamped[0, :4], [0, 0, 1280, 720])


def test_detector_end_to_end_shapes():
    from shufflecanet.config import desk_config
    from shufflecanet.model import Detector
    det = Detector(desk_config().model)
    raws = det(Tensor(np.zeros((2, 3, 64, 64), np.float32)))
    assert [r.shape for r in raws] == [(2, 21, 8, 8), (2, 21, 4, 4), (2, 21, 2, 2)]
    assert isinstance(det.head.convs[0].weight, Parameter)
