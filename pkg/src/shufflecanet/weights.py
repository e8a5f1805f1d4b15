"""Binary weights container.

Layout: 8-byte magic ``SHCANET1``, a 4-byte little-endian metadata length,
UTF-8 JSON metadata, then every tensor as little-endian float32, back to back
in metadata order.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SHCANET1"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class WeightsError(Exception):
    """Base class; subclasses keep the four failure modes distinguishable."""


class BadMagicError(WeightsError):
    pass


class ConfigHashError(WeightsError):
    pass


class ShapeMismatchError(WeightsError):
    pass


class TruncatedError(WeightsError):
    pass


class ChecksumError(WeightsError):
    pass


def encode_weights(state: dict, config_hash: str) -> bytes:
    records, chunks, offset = [], [], 0
    for name, arr in state.items():
        buf = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        records.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "crc32": zlib.crc32(buf)})
        chunks.append(buf)
        offset += len(buf)
    meta = {"format_version": FORMAT_VERSION, "config_hash": config_hash, "tensors": records}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(blob)) + blob + b"".join(chunks)


def decode_weights(data: bytes, verify: bool = False) -> tuple[dict, dict]:
    """Returns ``(metadata, {name: float32 array})``."""
    if data[:8] != MAGIC:
        raise BadMagicError(f"bad magic {data[:8]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise TruncatedError("file ends inside the header")
    (n,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + n:
        raise TruncatedError(f"metadata needs {n} bytes, only {len(data) - 12} present")
    try:
        meta = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsError(f"unreadable metadata: {exc}") from None
    payload = memoryview(data)[12 + n:]
    expected = 0
    for rec in meta["tensors"]:
        if rec["offset"] != expected:
            raise WeightsError(f"tensor {rec['name']!r}: offset {rec['offset']} is not contiguous (expected {expected})")
        expected += 4 * int(np.prod(rec["shape"], dtype=np.int64))
    if len(payload) < expected:
        raise TruncatedError(f"payload has {len(payload)} bytes, tensors need {expected}")
    if len(payload) > expected:
        raise WeightsError(f"{len(payload) - expected} trailing bytes after the payload")
    out = {}
    for rec in meta["tensors"]:
        size = 4 * int(np.prod(rec["shape"], dtype=np.int64))
        raw = payload[rec["offset"]:rec["offset"] + size]
        if verify and zlib.crc32(raw) != rec["crc32"]:
            raise ChecksumError(f"tensor {rec['name']!r}: checksum mismatch")
        out[rec["name"]] = np.frombuffer(raw, dtype=_LE_F32).reshape(rec["shape"]).astype(np.float32)
    return meta, out


def save_weights(model, path) -> None:
    Path(path).write_bytes(encode_weights(model.state_dict(), model.cfg.digest()))


def load_weights(path, model, ignore_hash: bool = False, verify: bool = False):
    """Fill ``model`` (built from the matching config) in place and return it."""
    meta, tensors = decode_weights(Path(path).read_bytes(), verify=verify)
    want = model.cfg.digest()
    if not ignore_hash and meta["config_hash"] != want:
        raise ConfigHashError(f"weights were saved for config {meta['config_hash'][:12]}, "
                              f"this config is {want[:12]}")
    own = model.state_dict()
    for name, arr in own.items():
        if name not in tensors:
            raise ShapeMismatchError(f"tensor {name!r} missing from the weights file")
        if tensors[name].shape != arr.shape:
            raise ShapeMismatchError(f"tensor {name!r}: file has shape {tensors[name].shape}, "
                                     f"model expects {arr.shape}")
    extra = [k for k in tensors if k not in own]
    if extra:
        raise ShapeMismatchError(f"unexpected tensor {extra[0]!r} in the weights file")
    model.load_state_dict({k: v.astype(own[k].dtype) for k, v in tensors.items()})
    return model
