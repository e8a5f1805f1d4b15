import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shufflecanet.data import (GRAY, AnnotationError, PPMError, Sample, decode_ppm, encode_ppm, letterbox,
                               letterbox_boxes, letterbox_geometry, load_dataset, mosaic, parse_jsonl, parse_voc_xml,
                               read_manifest, sample_seed, unletterbox_boxes)
from shufflecanet.synthetic import make_rectangles, write_dataset

NAMES = ("face", "mask")


def test_ppm_example_and_comments():
    raw = b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0])
    np.testing.assert_array_equal(decode_ppm(raw), [[[255, 0, 0], [0, 255, 0]]])
    commented = b"P6\n# made by hand\n2 # width\n1\n255\n" + bytes([255, 0, 0, 0, 255, 0])
    np.testing.assert_array_equal(decode_ppm(commented), decode_ppm(raw))


def test_ppm_errors_are_distinct():
    with pytest.raises(PPMError, match="magic"):
        decode_ppm(b"P3\n1 1\n255\n000")
    with pytest.raises(PPMError, match="truncated PPM payload"):
        decode_ppm(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(PPMError, match="maxval"):
        decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(PPMError, match="header"):
        decode_ppm(b"P6\n1")


@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_ppm_roundtrip(w, h, seed):
    img = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    assert decode_ppm(encode_ppm(img)).tobytes() == img.tobytes()


VOC = """<annotation><filename>a.ppm</filename>{}</annotation>"""
OBJ = "<object><name>{}</name><bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox></object>"


def test_voc_examples():
    rows = parse_voc_xml(VOC.format(OBJ.format("face", 1, 1, 11, 21)), NAMES)
    assert rows.tolist() == [[0, 0, 0, 10, 20]]
    assert parse_voc_xml(VOC.format(""), NAMES).shape == (0, 5)
    with pytest.raises(AnnotationError, match="dog"):
        parse_voc_xml(VOC.format(OBJ.format("dog", 1, 1, 5, 5)), NAMES)
    assert parse_voc_xml(VOC.format(OBJ.format("dog", 1, 1, 5, 5)), NAMES, ignore=("dog",)).shape == (0, 5)
    with pytest.raises(AnnotationError, match="malformed"):
        parse_voc_xml("<annotation><object>", NAMES)
    with pytest.raises(AnnotationError, match="ymax"):
        parse_voc_xml(VOC.format("<object><name>face</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>3</xmax>"
                                 "</bndbox></object>"), NAMES)
    with pytest.raises(AnnotationError, match="xmin must be"):
        parse_voc_xml(VOC.format(OBJ.format("mask", 5, 1, 5, 9)), NAMES)


def test_jsonl_parsing():
    text = "\n".join(json.dumps(r) for r in [
        {"image": "a.ppm", "class": "mask", "x1": 1, "y1": 2, "x2": 5, "y2": 9},
        {"image": "b.ppm", "class": 0, "x1": 0, "y1": 0, "x2": 3, "y2": 3},
    ])
    assert parse_jsonl(text, NAMES).tolist() == [[1, 1, 2, 5, 9], [0, 0, 0, 3, 3]]
    assert parse_jsonl(text, NAMES, image="dir/b.ppm").tolist() == [[0, 0, 0, 3, 3]]
    with pytest.raises(AnnotationError, match="line 1"):
        parse_jsonl("{not json", NAMES)
    with pytest.raises(AnnotationError, match="y2"):
        parse_jsonl('{"image": "a", "class": 0, "x1": 0, "y1": 0, "x2": 1}', NAMES)
    with pytest.raises(AnnotationError, match="cat"):
        parse_jsonl('{"image": "a", "class": "cat", "x1": 0, "y1": 0, "x2": 1, "y2": 1}', NAMES)


@pytest.mark.parametrize("fmt", ["voc", "jsonl"])
def test_dataset_roundtrip(tmp_path, fmt):
    samples = make_rectangles(4, 2, seed=3)
    manifest = write_dataset(samples, tmp_path, NAMES, fmt=fmt)
    assert len(read_manifest(manifest)) == 4
    back = load_dataset(manifest, NAMES)
    for a, b in zip(samples, back):
        assert a.image.tobytes() == b.image.tobytes()
        np.testing.assert_array_equal(a.annotations, b.annotations)


def test_manifest_errors(tmp_path):
    bad = tmp_path / "m.txt"
    bad.write_text("only-one-column\n")
    with pytest.raises(AnnotationError, match="TAB"):
        read_manifest(bad)


def test_sample_validates():
    with pytest.raises(ValueError):
        Sample(np.zeros((4, 4, 3), np.uint8), np.array([[0, 0, 0, 5, 2]]), "x")


@pytest.mark.parametrize("w,h,scale,nw,nh,left,top", [
    (1280, 720, 0.5, 640, 360, 0, 140), (640, 640, 1.0, 640, 640, 0, 0), (320, 320, 2.0, 640, 640, 0, 0),
])
def test_letterbox_examples(w, h, scale, nw, nh, left, top):
    meta, gw, gh = letterbox_geometry(w, h, 640)
    assert (meta.scale, gw, gh, meta.pad_left, meta.pad_top) == (scale, nw, nh, left, top)


def test_letterbox_image_and_identity():
    img = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    out, meta = letterbox(img, 16)
    assert out.tobytes() == img.tobytes() and meta.pad_left == meta.pad_top == 0
    wide = np.zeros((4, 16, 3), np.uint8)
    out, meta = letterbox(wide, 16)
    assert (out[:meta.pad_top] == GRAY).all() and (out[meta.pad_top:meta.pad_top + 4] == 0).all()
    with pytest.raises(ValueError):
        letterbox(np.zeros((0, 5, 3), np.uint8), 16)


@given(st.integers(1, 3000), st.integers(1, 3000), st.sampled_from([64, 320, 640]), st.integers(0, 2**31))
def test_letterbox_geometry_and_roundtrip(w, h, size, seed):
    meta, nw, nh = letterbox_geometry(w, h, size)
    assert nw <= size and nh <= size and max(nw, nh) == size
    assert abs(nw * h - nh * w) <= max(w, h)
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, w, (5, 2)), axis=1)
    y = np.sort(rng.uniform(0, h, (5, 2)), axis=1)
    boxes = np.column_stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]])
    back = unletterbox_boxes(letterbox_boxes(boxes, meta), meta)
    assert np.abs(back - boxes).max() <= 0.5


def _solid(color, w=32, h=32, cls=0):
    img = np.zeros((h, w, 3), np.uint8)
    img[:] = color
    return Sample(img, np.array([[cls, 2, 2, w - 2, h - 2]], dtype=float), "solid")


def test_mosaic_quadrants():
    colors = [(255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0)]
    s = 32
    out = mosaic([_solid(c, cls=k % 2) for k, c in enumerate(colors)], seed=5, out_size=s)
    rng = np.random.default_rng(5)
    xc, yc = rng.integers(s // 2, 3 * s // 2 + 1, size=2) / 2
    # probes one pixel away from the centre lines, inside each quadrant
    probes = [(yc - 2, xc - 2), (yc - 2, xc + 1), (yc + 1, xc - 2), (yc + 1, xc + 1)]
    for (py, px), color in zip(probes, colors):
        assert tuple(out.image[int(py), int(px)]) == color
    assert out.image.shape == (s, s, 3)


def test_mosaic_rejects_wrong_count():
    with pytest.raises(ValueError, match="4"):
        mosaic(make_rectangles(3, 2), seed=0, out_size=64)


@given(st.integers(0, 2**31), st.sampled_from([(1.0, 1.0), (0.5, 1.5)]))
def test_mosaic_bounds_classes_determinism(seed, scale_range):
    samples = make_rectangles(4, 2, seed=seed % 1000, boxes_per_image=(1, 3))
    a = mosaic(samples, seed, out_size=64, scale_range=scale_range)
    b = mosaic(samples, seed, out_size=64, scale_range=scale_range)
    assert a.image.tobytes() == b.image.tobytes() and np.array_equal(a.annotations, b.annotations)
    ann = a.annotations
    assert ((ann[:, 1:] >= 0) & (ann[:, 1:] <= 64)).all()
    assert (ann[:, 3] > ann[:, 1]).all() and (ann[:, 4] > ann[:, 2]).all()
    source = {int(c) for s in samples for c in s.annotations[:, 0]}
    assert {int(c) for c in ann[:, 0]} <= source


def test_sample_seed_is_stable():
    assert sample_seed(0, 1, 2) == sample_seed(0, 1, 2)
    assert len({sample_seed(0, e, i) for e in range(5) for i in range(5)}) == 25


def test_synthetic_images_are_single_class():
    for s in make_rectangles(8, 2, seed=0):
        assert len(set(s.annotations[:, 0].tolist())) == 1
        assert 1 <= len(s.annotations) <= 2
