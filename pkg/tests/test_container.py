import dataclasses
import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eclipse.container import MODEL_MAGIC, load_model, model_from_bytes, model_to_bytes, save_model
from eclipse.errors import ChecksumMismatch, FormatError
from eclipse.fixtures import random_mlp, toy_cnn
from eclipse.model import Activation, LinearLayer, ModelGraph


def _same(a: ModelGraph, b: ModelGraph):
    assert a.input_shape == b.input_shape and a.dtype_tag == b.dtype_tag
    assert len(a.layers) == len(b.layers)
    for la, lb in zip(a.layers, b.layers):
        assert la.kind == lb.kind
        if la.kind == "maxpool":
            assert (la.size, la.stride) == (lb.size, lb.stride)
            continue
        assert la.activation is lb.activation
        wa = la.weights if la.kind == "linear" else la.kernel
        wb = lb.weights if lb.kind == "linear" else lb.kernel
        assert wa.tobytes() == wb.tobytes() and la.bias.tobytes() == lb.bias.tobytes()
        if la.kind == "conv":
            assert (la.padding, la.stride) == (lb.padding, lb.stride)


def test_hand_built_container_matches():
    # independent encoder for a one-layer model, written straight from the format description
    A = np.array([[1.0, -2.0, 0.5], [3.0, 4.0, -0.25]])
    b = np.array([0.125, 0.0, -1.0])
    model = ModelGraph((LinearLayer(A, b, Activation.RELU),), (2,))
    blob = A.astype("<f8").tobytes() + b.astype("<f8").tobytes()
    manifest = {
        "dtype": "f64",
        "input_shape": [2],
        "layers": [
            {
                "activation": "relu",
                "bias": {"length": 24, "offset": 48},
                "dims": [2, 3],
                "kind": "linear",
                "weights": {"length": 48, "offset": 0},
            }
        ],
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = b"ECLMDL01" + struct.pack("<Q", len(text)) + text + blob
    expected = body + struct.pack("<I", zlib.crc32(body))
    assert model_to_bytes(model) == expected


def test_round_trip_cnn_bit_identical(tmp_path):
    model = toy_cnn(0, fit=False)
    path = tmp_path / "m.ecl"
    save_model(model, path)
    _same(model, load_model(path))
    assert model_to_bytes(load_model(path)) == path.read_bytes()


@given(seed=st.integers(0, 2**32 - 1), depth=st.integers(1, 4))
def test_round_trip_random_mlps(seed, depth):
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in rng.integers(1, 12, size=depth + 1))
    model = random_mlp(seed, dims)
    _same(model, model_from_bytes(model_to_bytes(model)))


def test_f32_storage_rounds_once():
    model = dataclasses.replace(random_mlp(0, (5, 4, 3)), dtype_tag="f32")
    loaded = model_from_bytes(model_to_bytes(model))
    for la, lb in zip(model.layers, loaded.layers):
        np.testing.assert_array_equal(lb.weights, la.weights.astype(np.float32).astype(np.float64))
        assert lb.weights.dtype == np.float64
    assert model_to_bytes(loaded) == model_to_bytes(model)


@pytest.fixture
def raw():
    return model_to_bytes(random_mlp(0, (6, 5, 4)))


def test_truncated_blob(raw):
    with pytest.raises(FormatError) as info:
        model_from_bytes(raw[:-20])
    assert "byte offset" in str(info.value) and info.value.offset is not None


def test_too_short(raw):
    with pytest.raises(FormatError):
        model_from_bytes(raw[:10])


def test_bad_magic(raw):
    with pytest.raises(FormatError) as info:
        model_from_bytes(b"XXXXXXXX" + raw[8:])
    assert info.value.offset == 0


def test_manifest_blob_disagreement(raw):
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    manifest = json.loads(raw[16 : 16 + mlen])
    manifest["layers"][0]["weights"]["length"] += 8
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = raw[:8] + struct.pack("<Q", len(text)) + text + raw[16 + mlen : -4]
    forged = body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(FormatError) as info:
        model_from_bytes(forged)
    assert not isinstance(info.value, ChecksumMismatch)
    assert info.value.offset == 16 + len(text)


def test_checksum_mismatch(raw):
    flipped = bytearray(raw)
    flipped[-10] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        model_from_bytes(bytes(flipped))


def test_manifest_garbage(raw):
    broken = raw[:16] + b"!" + raw[17:]
    with pytest.raises(FormatError):
        model_from_bytes(broken)


def test_magic_constant():
    assert MODEL_MAGIC == b"ECLMDL01" and len(MODEL_MAGIC) == 8
