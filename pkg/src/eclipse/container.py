"""Binary container shared by model and key files.

Layout::

    magic (8 bytes) | manifest length (u64 LE) | manifest (UTF-8 JSON)
    | blob region | CRC32 of all preceding bytes (u32 LE)

Blob references in the manifest are ``{"offset", "length"}`` pairs relative to
the start of the blob region.  Arrays are little-endian and row-major.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import ChecksumMismatch, FormatError
from .model import Activation, ConvLayer, LinearLayer, ModelGraph, PoolLayer

MODEL_MAGIC = b"ECLMDL01"
KEY_MAGIC = b"ECLKEY01"

_DTYPES = {"f64": "<f8", "f32": "<f4", "i64": "<i8", "u8": "u1"}
_HEADER = 8 + 8
_TRAILER = 4


class BlobWriter:
    def __init__(self):
        self._parts = []
        self._size = 0

    def add(self, array, dtype_tag) -> dict:
        data = np.ascontiguousarray(array, dtype=_DTYPES[dtype_tag]).tobytes()
        ref = {"offset": self._size, "length": len(data)}
        self._parts.append(data)
        self._size += len(data)
        return ref

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


def pack(magic: bytes, manifest: dict, blob: bytes) -> bytes:
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = magic + struct.pack("<Q", len(text)) + text + blob
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def unpack(data: bytes, magic: bytes, blob_length) -> tuple:
    """Parse the envelope; ``blob_length(manifest)`` gives the declared blob size."""
    if len(data) < _HEADER + _TRAILER:
        raise FormatError(f"file too short ({len(data)} bytes)", len(data))
    if data[:8] != magic:
        raise FormatError(f"bad magic {data[:8]!r}, expected {magic!r}", 0)
    (mlen,) = struct.unpack_from("<Q", data, 8)
    if _HEADER + mlen > len(data) - _TRAILER:
        raise FormatError(f"manifest length {mlen} runs past end of file", 8)
    try:
        manifest = json.loads(data[_HEADER : _HEADER + mlen].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError("manifest is not UTF-8", _HEADER + exc.start) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", _HEADER + exc.pos) from exc
    if not isinstance(manifest, dict):
        raise FormatError("manifest must be a JSON object", _HEADER)
    blob_start = _HEADER + mlen
    actual = len(data) - _TRAILER - blob_start
    try:
        declared = blob_length(manifest)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest is missing or has bad field: {exc}", _HEADER) from exc
    if declared != actual:
        raise FormatError(
            f"blob region holds {actual} bytes but the manifest declares {declared}", blob_start
        )
    (stored,) = struct.unpack_from("<I", data, len(data) - _TRAILER)
    computed = zlib.crc32(data[: len(data) - _TRAILER]) & 0xFFFFFFFF
    if stored != computed:
        raise ChecksumMismatch(
            f"CRC32 mismatch: stored {stored:08x}, computed {computed:08x}", len(data) - _TRAILER
        )
    return manifest, data[blob_start : len(data) - _TRAILER], blob_start


def read_array(blob, ref, dtype_tag, shape, blob_start) -> np.ndarray:
    offset, length = int(ref["offset"]), int(ref["length"])
    dtype = np.dtype(_DTYPES[dtype_tag])
    expected = int(np.prod(shape)) * dtype.itemsize
    if length != expected:
        raise FormatError(f"blob of {length} bytes cannot hold shape {list(shape)}", blob_start + offset)
    if offset < 0 or offset + length > len(blob):
        raise FormatError("blob reference out of bounds", blob_start + offset)
    return np.frombuffer(blob, dtype=dtype, count=expected // dtype.itemsize, offset=offset).reshape(shape)


def _refs_total(refs) -> int:
    return sum(int(r["length"]) for r in refs)


# --------------------------------------------------------------------------
# models


def model_to_bytes(model: ModelGraph) -> bytes:
    tag = model.dtype_tag
    blobs = BlobWriter()
    entries = []
    for layer in model.layers:
        if isinstance(layer, LinearLayer):
            entries.append(
                {
                    "kind": "linear",
                    "dims": list(layer.weights.shape),
                    "activation": layer.activation.value,
                    "weights": blobs.add(layer.weights, tag),
                    "bias": blobs.add(layer.bias, tag),
                }
            )
        elif isinstance(layer, ConvLayer):
            entries.append(
                {
                    "kind": "conv",
                    "dims": list(layer.kernel.shape),
                    "activation": layer.activation.value,
                    "padding": list(layer.padding),
                    "stride": list(layer.stride),
                    "weights": blobs.add(layer.kernel, tag),
                    "bias": blobs.add(layer.bias, tag),
                }
            )
        else:
            entries.append({"kind": "maxpool", "size": layer.size, "stride": layer.stride})
    manifest = {"dtype": tag, "input_shape": list(model.input_shape), "layers": entries}
    return pack(MODEL_MAGIC, manifest, blobs.getvalue())


def _model_blob_length(manifest):
    refs = []
    for entry in manifest["layers"]:
        if entry["kind"] in ("linear", "conv"):
            refs += [entry["weights"], entry["bias"]]
    return _refs_total(refs)


def model_from_bytes(data: bytes) -> ModelGraph:
    manifest, blob, start = unpack(data, MODEL_MAGIC, _model_blob_length)
    tag = manifest.get("dtype")
    if tag not in ("f32", "f64"):
        raise FormatError(f"unsupported dtype {tag!r}", _HEADER)
    layers = []
    try:
        for entry in manifest["layers"]:
            kind = entry["kind"]
            if kind == "maxpool":
                layers.append(PoolLayer(entry["size"], entry["stride"]))
                continue
            dims = tuple(entry["dims"])
            weights = read_array(blob, entry["weights"], tag, dims, start)
            if kind == "linear":
                bias = read_array(blob, entry["bias"], tag, (dims[1],), start)
                layers.append(LinearLayer(weights, bias, Activation(entry["activation"])))
            elif kind == "conv":
                bias = read_array(blob, entry["bias"], tag, (dims[0],), start)
                layers.append(
                    ConvLayer(
                        weights,
                        bias,
                        tuple(entry["padding"]),
                        tuple(entry["stride"]),
                        Activation(entry["activation"]),
                    )
                )
            else:
                raise FormatError(f"unknown layer kind {kind!r}", _HEADER)
        return ModelGraph(tuple(layers), tuple(manifest["input_shape"]), tag)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid layer entry: {exc}", _HEADER) from exc


def save_model(model: ModelGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
