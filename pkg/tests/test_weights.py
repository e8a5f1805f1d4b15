import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shufflecanet.config import ConfigError, RunConfig, desk_config, full_scale_model
from shufflecanet.model import Detector
from shufflecanet.weights import (MAGIC, BadMagicError, ChecksumError, ConfigHashError, ShapeMismatchError,
                                  TruncatedError, WeightsError, decode_weights, encode_weights, load_weights,
                                  save_weights)


@pytest.fixture(scope="module")
def saved(tmp_path_factory):
    cfg = desk_config(class_names=("face", "mask"))
    model = Detector(cfg.model, seed=4)
    path = tmp_path_factory.mktemp("w") / "m.weights"
    save_weights(model, path)
    return cfg, model, path


def test_roundtrip_bit_exact(saved):
    cfg, model, path = saved
    fresh = load_weights(path, Detector(cfg.model, seed=99))
    for (ka, a), (kb, b) in zip(model.state_dict().items(), fresh.state_dict().items()):
        assert ka == kb and a.tobytes() == b.tobytes()


def test_layout_is_contiguous(saved):
    _, model, path = saved
    data = path.read_bytes()
    assert data[:8] == MAGIC
    meta, tensors = decode_weights(data)
    offsets = [r["offset"] for r in meta["tensors"]]
    sizes = [4 * int(np.prod(r["shape"])) for r in meta["tensors"]]
    assert offsets == list(np.cumsum([0] + sizes[:-1]))
    n = int.from_bytes(data[8:12], "little")
    assert len(data) - 12 - n == sum(sizes)
    assert list(tensors) == list(model.state_dict())


def test_corrupt_byte_needs_verify(saved, tmp_path):
    cfg, _, path = saved
    data = bytearray(path.read_bytes())
    data[-7] ^= 0xFF
    bad = tmp_path / "bad.weights"
    bad.write_bytes(bytes(data))
    load_weights(bad, Detector(cfg.model))
    with pytest.raises(ChecksumError):
        load_weights(bad, Detector(cfg.model), verify=True)
    load_weights(path, Detector(cfg.model), verify=True)


def test_distinct_errors(saved, tmp_path):
    cfg, _, path = saved
    data = path.read_bytes()
    cases = {
        "magic": (b"NOTMAGIC" + data[8:], BadMagicError),
        "short": (data[:-10], TruncatedError),
        "header": (data[:10], TruncatedError),
        "trailing": (data + b"\0\0\0\0", WeightsError),
    }
    for name, (blob, err) in cases.items():
        p = tmp_path / f"{name}.weights"
        p.write_bytes(blob)
        with pytest.raises(err):
            load_weights(p, Detector(cfg.model))
    assert len({BadMagicError, ConfigHashError, ShapeMismatchError, TruncatedError, ChecksumError}) == 5


def test_hash_and_shape_checks(saved):
    cfg, _, path = saved
    other = desk_config(class_names=("face", "mask", "other"))
    with pytest.raises(ConfigHashError):
        load_weights(path, Detector(other.model))
    with pytest.raises(ShapeMismatchError, match="head"):
        load_weights(path, Detector(other.model), ignore_hash=True)
    off = cfg.with_ablation(backbone="shufflenetv2")
    with pytest.raises(ShapeMismatchError):
        load_weights(path, Detector(off.model), ignore_hash=True)


@given(st.dictionaries(st.text("abc.", min_size=1, max_size=6),
                       st.lists(st.integers(1, 3), min_size=0, max_size=3), max_size=4), st.integers(0, 1000))
def test_encode_decode_property(shapes, seed):
    rng = np.random.default_rng(seed)
    state = {k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()}
    meta, back = decode_weights(encode_weights(state, "h"), verify=True)
    assert meta["config_hash"] == "h" and list(back) == list(state)
    assert all(back[k].tobytes() == state[k].tobytes() for k in state)


def test_config_json_roundtrip():
    for cfg in (desk_config(class_names=("face", "mask")), RunConfig(model=full_scale_model()),
                desk_config().with_ablation("shufflenetv2", "panet-sum", "ciou")):
        once = RunConfig.from_json(cfg.to_json())
        assert once == cfg and RunConfig.from_json(once.to_json()).to_json() == once.to_json()
    with pytest.raises(ConfigError):
        RunConfig.from_json('{"bogus": 1}')
    with pytest.raises(ConfigError):
        RunConfig.from_json("{")
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"class_names": ["a"], "model": {"head": {"num_classes": 2}}})


def test_hash_covers_anchors():
    a = desk_config()
    b = desk_config(anchors=tuple((w + 1, h) for w, h in a.model.head.anchors))
    assert a.model_hash() != b.model_hash() and a.model_hash() == desk_config().model_hash()
