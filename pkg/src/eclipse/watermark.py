"""Simulated white-box watermark schemes and their verifiers.

Three families are modelled, one per way a scheme reads its signature:

* ``weight_projection`` -- bits are the signs of ``S @ w`` for the flattened
  weights ``w`` of the marked layer.
* ``weight_selection`` -- bits are the signs of the weights at secret positions.
* ``activation_projection`` -- bits are the signs of ``S @ a`` where ``a`` is
  the layer's mean pre-activation response over a secret probe set.

Embedding is data-free: proximal gradient descent on the logistic bit loss
over the marked layer's weights, with ``penalty * ||W - W0||^2`` keeping the
change small.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .container import KEY_MAGIC, BlobWriter, _refs_total, pack, read_array, unpack
from .errors import DimensionMismatch, EclipseError, FailedToConverge, FormatError, LengthMismatch
from .model import (
    ConvLayer,
    LinearLayer,
    ModelGraph,
    conv_response,
    conv_windows,
    flat_weights,
    forward_until,
    is_weighted,
    linear_response,
)


class Scheme(str, Enum):
    WEIGHT_PROJECTION = "weight_projection"
    WEIGHT_SELECTION = "weight_selection"
    ACTIVATION_PROJECTION = "activation_projection"


class Status(str, Enum):
    VERIFIED = "Verified"
    BELOW_THRESHOLD = "BelowThreshold"
    NO_SIGNATURE = "NoSignature"


STRATEGIES = ("reshape_truncate", "merge_adjacent", "crop_zero_frame")
DEFAULT_DELTA = 0.05


@dataclass(frozen=True, eq=False)
class SecretKey:
    scheme: Scheme
    layer_index: int
    dim: int
    projection: np.ndarray = None
    positions: np.ndarray = None
    probes: np.ndarray = None
    threshold: float = DEFAULT_DELTA

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def n_bits(self) -> int:
        if self.scheme is Scheme.WEIGHT_SELECTION:
            return len(self.positions)
        return self.projection.shape[0]


@dataclass(frozen=True)
class NoSignature:
    reason: str


@dataclass(frozen=True)
class VerificationOutcome:
    status: Status
    confidence: float = None
    reason: str = None

    @property
    def verified(self) -> bool:
        return self.status is Status.VERIFIED

    def to_dict(self) -> dict:
        return {"outcome": self.status.value, "confidence": self.confidence, "reason": self.reason}


@dataclass(frozen=True)
class EmbedResult:
    model: ModelGraph
    similarity: float
    max_abs_delta: float
    steps_run: int


def random_message(n_bits: int, seed=None) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2, size=n_bits).astype(np.uint8)


def similarity(m_o, m_e) -> float:
    """Fraction of positions where the two bit strings agree."""
    m_o, m_e = np.asarray(m_o), np.asarray(m_e)
    if m_o.shape != m_e.shape:
        raise LengthMismatch(f"messages differ in length: {m_o.shape} vs {m_e.shape}")
    if m_o.size == 0:
        raise LengthMismatch("messages are empty")
    return float(np.mean(m_o == m_e))


# --------------------------------------------------------------------------
# carriers


def _layer_at(model, index):
    if not 0 <= index < len(model.layers):
        return NoSignature(f"layer {index} does not exist (model has {len(model.layers)})")
    layer = model.layers[index]
    if not is_weighted(layer):
        return NoSignature(f"layer {index} is {layer.kind}, not a weighted layer")
    return layer


def _layer_inputs(model, index, probes):
    return forward_until(model, probes, index)


def _response(layer, h):
    if isinstance(layer, LinearLayer):
        if h.ndim > 2:
            h = h.reshape(h.shape[0], -1)
        return linear_response(layer, h)
    return conv_response(layer, h).reshape(h.shape[0], -1)


def carrier(model: ModelGraph, key: SecretKey):
    """The vector a scheme decodes: flattened weights or the mean layer response."""
    layer = _layer_at(model, key.layer_index)
    if isinstance(layer, NoSignature):
        return layer
    if key.scheme is not Scheme.ACTIVATION_PROJECTION:
        return flat_weights(layer)
    try:
        h = _layer_inputs(model, key.layer_index, key.probes)
        return _response(layer, h).mean(axis=0)
    except EclipseError as exc:
        return NoSignature(f"probe set no longer fits the model: {exc}")


def _fit(v, dim):
    if len(v) >= dim:
        return v[:dim]
    return np.concatenate([v, np.zeros(dim - len(v))])


def decode(v, key: SecretKey, fit=False):
    """Bits from a carrier vector; ``fit`` truncates or zero-pads it to the key dimension."""
    if isinstance(v, NoSignature):
        return v
    if fit:
        v = _fit(v, key.dim)
    if key.scheme is Scheme.WEIGHT_SELECTION:
        if len(v) <= int(np.max(key.positions)):
            return NoSignature(f"positions up to {int(np.max(key.positions))} exceed carrier length {len(v)}")
        return (v[key.positions] > 0).astype(np.uint8)
    if len(v) != key.projection.shape[1]:
        what = "response" if key.scheme is Scheme.ACTIVATION_PROJECTION else "flattened weight"
        return NoSignature(f"{what} dim {len(v)} != key dim {key.projection.shape[1]}")
    # sigmoid(z) > 0.5 is z > 0
    return (key.projection @ v > 0).astype(np.uint8)


def extract(model: ModelGraph, key: SecretKey):
    """Passive extraction: a bit array, or ``NoSignature`` if the layer no longer fits."""
    return decode(carrier(model, key), key)


def _outcome(bits, m_o, delta) -> VerificationOutcome:
    if isinstance(bits, NoSignature):
        return VerificationOutcome(Status.NO_SIGNATURE, None, bits.reason)
    c = similarity(m_o, bits)
    status = Status.VERIFIED if c > 0.5 + delta else Status.BELOW_THRESHOLD
    return VerificationOutcome(status, c)


def verify(model: ModelGraph, key: SecretKey, m_o, delta=None) -> VerificationOutcome:
    """Verified when similarity exceeds ``0.5 + delta`` (strictly)."""
    delta = key.threshold if delta is None else delta
    return _outcome(extract(model, key), m_o, delta)


# --------------------------------------------------------------------------
# active verification


def merge_adjacent(model: ModelGraph, index: int):
    """Collapse linear layers ``index`` and ``index + 1`` into one candidate layer."""
    if index + 1 >= len(model.layers):
        return NoSignature("no layer follows the marked layer")
    a, b = model.layers[index], model.layers[index + 1]
    if not (isinstance(a, LinearLayer) and isinstance(b, LinearLayer)):
        return NoSignature("marked layer and its successor are not both linear")
    merged = LinearLayer(a.weights @ b.weights, a.bias @ b.weights + b.bias, b.activation)
    layers = list(model.layers)
    layers[index : index + 2] = [merged]
    return model.replace_layers(layers)


def zero_frame(kernel, tol=1e-9):
    """Widths (top, bottom, left, right) of all-zero border rows/columns across every slice."""
    scale = float(np.max(np.abs(kernel))) if kernel.size else 0.0
    zero = np.abs(kernel) <= tol * scale
    rows = np.all(zero, axis=(0, 1, 3))
    cols = np.all(zero, axis=(0, 1, 2))

    def run(flags):
        n = 0
        for f in flags:
            if not f:
                break
            n += 1
        return n

    if rows.all() or cols.all():
        return (0, 0, 0, 0)
    return (run(rows), run(rows[::-1]), run(cols), run(cols[::-1]))


def crop_zero_frame(model: ModelGraph, index: int, tol=1e-9):
    layer = _layer_at(model, index)
    if not isinstance(layer, ConvLayer):
        return NoSignature("marked layer is not convolutional")
    t, b, l, r = zero_frame(layer.kernel, tol)
    if not any((t, b, l, r)):
        return NoSignature("no zero frame detected in the kernel")
    kh, kw = layer.kernel.shape[2:]
    kernel = layer.kernel[:, :, t : kh - b, l : kw - r]
    padding = tuple(max(0, p - f) for p, f in zip(layer.padding, (t, b, l, r)))
    layers = list(model.layers)
    layers[index] = ConvLayer(kernel, layer.bias, padding, layer.stride, layer.activation)
    return model.replace_layers(layers)


def active_verify(model: ModelGraph, key: SecretKey, m_o, delta=None, strategies=STRATEGIES):
    """Try each undo strategy, extract with dimension fitting, keep the best outcome.

    Returns ``(best_outcome, trace)`` where ``trace`` has one entry per strategy.
    """
    delta = key.threshold if delta is None else delta
    trace = []
    best = None
    for name in strategies:
        if name == "reshape_truncate":
            candidate = model
        elif name == "merge_adjacent":
            candidate = merge_adjacent(model, key.layer_index)
        elif name == "crop_zero_frame":
            candidate = crop_zero_frame(model, key.layer_index)
        else:
            raise ValueError(f"unknown strategy {name!r}")
        if isinstance(candidate, NoSignature):
            outcome = _outcome(candidate, m_o, delta)
        else:
            outcome = _outcome(decode(carrier(candidate, key), key, fit=True), m_o, delta)
        trace.append({"strategy": name, **outcome.to_dict()})
        if outcome.confidence is not None and (best is None or outcome.confidence > best.confidence):
            best = outcome
    if best is None:
        best = VerificationOutcome(Status.NO_SIGNATURE, None, "every strategy failed to extract")
    return best, trace


# --------------------------------------------------------------------------
# key generation and embedding


def make_key(
    model: ModelGraph,
    scheme,
    layer_index: int,
    n_bits: int = 256,
    seed=None,
    n_probes: int = 64,
    threshold: float = DEFAULT_DELTA,
) -> SecretKey:
    """Draw key material sized for layer ``layer_index`` of ``model``."""
    scheme = Scheme(scheme)
    layer = _layer_at(model, layer_index)
    if isinstance(layer, NoSignature):
        raise DimensionMismatch(layer.reason)
    rng = np.random.default_rng(seed)
    if scheme is Scheme.ACTIVATION_PROJECTION:
        probes = rng.uniform(0.0, 1.0, size=(n_probes,) + model.input_shape)
        h = _layer_inputs(model, layer_index, probes)
        dim = _response(layer, h).shape[1]
        if n_bits > dim:
            raise DimensionMismatch(f"{n_bits} bits exceed the layer's response dim {dim}")
        S = rng.standard_normal((n_bits, dim))
        return SecretKey(scheme, layer_index, dim, projection=S, probes=probes, threshold=threshold)
    dim = flat_weights(layer).size
    if n_bits > dim:
        raise DimensionMismatch(f"{n_bits} bits exceed the layer's {dim} weights")
    if scheme is Scheme.WEIGHT_SELECTION:
        positions = np.sort(rng.choice(dim, size=n_bits, replace=False)).astype(np.int64)
        return SecretKey(scheme, layer_index, dim, positions=positions, threshold=threshold)
    S = rng.standard_normal((n_bits, dim))
    return SecretKey(scheme, layer_index, dim, projection=S, threshold=threshold)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _carrier_map(model, key, layer):
    """Linear map ``w -> carrier`` as (forward, adjoint) closures over the flattened weights."""
    if key.scheme is not Scheme.ACTIVATION_PROJECTION:
        return (lambda w: w), (lambda g: g)
    h = _layer_inputs(model, key.layer_index, key.probes)
    if isinstance(layer, LinearLayer):
        xbar = h.reshape(h.shape[0], -1).mean(axis=0)
        shape = layer.weights.shape
        return (
            lambda w: xbar @ w.reshape(shape) + layer.bias,
            lambda g: np.outer(xbar, g).reshape(-1),
        )
    # conv response is linear in the input, so the mean response is the response to the mean input
    win = conv_windows(layer, h.mean(axis=0)[None])[0]  # C, H', W', kh, kw
    P = layer.kernel.shape[0]
    out_hw = win.shape[1:3]
    shape = layer.kernel.shape

    def fwd(w):
        out = np.tensordot(win, w.reshape(shape), axes=([0, 3, 4], [1, 2, 3]))  # H', W', P
        return (np.moveaxis(out, 2, 0) + layer.bias[:, None, None]).reshape(-1)

    def adj(g):
        g = g.reshape((P,) + out_hw)
        return np.einsum("phw,chwij->pcij", g, win).reshape(-1)

    return fwd, adj


def _rebuild(layer, w):
    if isinstance(layer, LinearLayer):
        return dataclasses.replace(layer, weights=w.reshape(layer.weights.shape))
    return dataclasses.replace(layer, kernel=w.reshape(layer.kernel.shape))


def embed(
    model: ModelGraph,
    key: SecretKey,
    message,
    steps: int = 500,
    rate: float = 0.05,
    penalty: float = 1e-3,
    margin: float = 2.0,
    check: bool = True,
) -> EmbedResult:
    """Write ``message`` into the marked layer of a copy of ``model``.

    Stops early once every bit decodes correctly with logit margin ``margin``.
    Raises ``FailedToConverge`` when ``check`` is set and the final similarity
    is below 0.9.
    """
    message = np.asarray(message, dtype=np.uint8)
    layer = _layer_at(model, key.layer_index)
    if isinstance(layer, NoSignature):
        raise DimensionMismatch(layer.reason)
    if len(message) != key.n_bits:
        raise LengthMismatch(f"message has {len(message)} bits, key expects {key.n_bits}")
    w0 = flat_weights(layer).copy()
    fwd, adj = _carrier_map(model, key, layer)
    if len(fwd(w0)) != key.dim:
        raise DimensionMismatch(f"layer carrier dim {len(fwd(w0))} != key dim {key.dim}")
    sign = 2.0 * message - 1.0
    if key.scheme is Scheme.WEIGHT_SELECTION:
        # logits in units of a quarter weight-std, so the margin is a modest push
        scale = 4.0 / (np.std(w0) or 1.0)
        T = lambda v: scale * v[key.positions]  # noqa: E731

        def T_adj(g):
            out = np.zeros(key.dim)
            out[key.positions] = scale * g
            return out
    else:
        S = key.projection
        T = lambda v: S @ v  # noqa: E731
        T_adj = lambda g: S.T @ g  # noqa: E731

    w = w0.copy()
    shrink = 1.0 / (1.0 + 2.0 * rate * penalty)
    steps_run = 0
    for _ in range(steps):
        z = T(fwd(w))
        if np.all(sign * z >= margin):
            break
        grad = adj(T_adj(_sigmoid(z) - message)) / len(message)
        # proximal step for the quadratic penalty around w0
        w = w0 + (w - rate * grad - w0) * shrink
        steps_run += 1
    layers = list(model.layers)
    layers[key.layer_index] = _rebuild(layer, w)
    marked = model.replace_layers(layers)
    bits = extract(marked, key)
    sim = similarity(message, bits)
    if check and sim < 0.9:
        raise FailedToConverge(f"similarity {sim:.3f} < 0.9 after {steps_run} steps")
    return EmbedResult(marked, sim, float(np.max(np.abs(w - w0))), steps_run)


# --------------------------------------------------------------------------
# key files


def key_to_bytes(key: SecretKey, message=None) -> bytes:
    blobs = BlobWriter()
    manifest = {
        "scheme": key.scheme.value,
        "layer_index": key.layer_index,
        "dim": key.dim,
        "threshold": key.threshold,
        "blobs": {},
    }
    arrays = {
        "projection": (key.projection, "f64"),
        "positions": (key.positions, "i64"),
        "probes": (key.probes, "f64"),
        "message": (message, "u8"),
    }
    for name, (arr, tag) in arrays.items():
        if arr is None:
            continue
        ref = blobs.add(arr, tag)
        manifest["blobs"][name] = {**ref, "dtype": tag, "shape": list(np.shape(arr))}
    return pack(KEY_MAGIC, manifest, blobs.getvalue())


def key_from_bytes(data: bytes):
    """Returns ``(key, message_or_None)``."""
    manifest, blob, start = unpack(data, KEY_MAGIC, lambda m: _refs_total(m["blobs"].values()))
    try:
        arrays = {
            name: read_array(blob, ref, ref["dtype"], tuple(ref["shape"]), start)
            for name, ref in manifest["blobs"].items()
        }
        key = SecretKey(
            Scheme(manifest["scheme"]),
            int(manifest["layer_index"]),
            int(manifest["dim"]),
            projection=arrays.get("projection"),
            positions=arrays.get("positions"),
            probes=arrays.get("probes"),
            threshold=float(manifest["threshold"]),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid key manifest: {exc}", 16) from exc
    message = arrays.get("message")
    return key, (None if message is None else message.copy())


def save_key(key: SecretKey, path, message=None) -> None:
    with open(path, "wb") as fh:
        fh.write(key_to_bytes(key, message))


def load_key(path):
    with open(path, "rb") as fh:
        return key_from_bytes(fh.read())
