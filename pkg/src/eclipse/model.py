"""Model graph types and deterministic forward inference.

Layers hold float64 numpy arrays that are frozen (read-only) on construction;
every transform builds new layers instead of mutating old ones.

Linear layers compute ``x @ A + b`` with ``A`` of shape ``(m, n)``.  Conv
layers hold a kernel of shape ``(P, C, kh, kw)`` and compute a cross-correlation
over a ``(C, H, W)`` input.  Flattening at a conv -> linear boundary is C-order
over ``(P, H, W)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, EclipseError, EmptyOutput, InvalidShape


class Activation(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    SOFTMAX = "softmax"


def _frozen(array, ndim, name):
    out = np.array(array, dtype=np.float64, order="C", copy=True)
    if out.ndim != ndim:
        raise InvalidShape(f"{name} must have {ndim} axes, got shape {out.shape}")
    if 0 in out.shape:
        raise InvalidShape(f"{name} has an empty axis: {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class LinearLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        w = _frozen(self.weights, 2, "weights")
        b = _frozen(self.bias, 1, "bias")
        if b.shape[0] != w.shape[1]:
            raise InvalidShape(f"bias length {b.shape[0]} != weight columns {w.shape[1]}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    kind = "linear"


@dataclass(frozen=True, eq=False)
class ConvLayer:
    kernel: np.ndarray
    bias: np.ndarray
    padding: tuple = (0, 0, 0, 0)  # top, bottom, left, right
    stride: tuple = (1, 1)
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        k = _frozen(self.kernel, 4, "kernel")
        b = _frozen(self.bias, 1, "bias")
        if b.shape[0] != k.shape[0]:
            raise InvalidShape(f"bias length {b.shape[0]} != feature maps {k.shape[0]}")
        padding = tuple(int(p) for p in self.padding)
        stride = tuple(int(s) for s in self.stride)
        if len(padding) != 4 or min(padding) < 0:
            raise InvalidShape(f"padding must be 4 non-negative ints, got {self.padding}")
        if len(stride) != 2 or min(stride) < 1:
            raise InvalidShape(f"stride must be 2 positive ints, got {self.stride}")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "padding", padding)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "activation", Activation(self.activation))

    kind = "conv"


@dataclass(frozen=True)
class PoolLayer:
    """Max pooling over square windows."""

    size: int = 2
    stride: int = 1

    def __post_init__(self):
        if int(self.size) < 1 or int(self.stride) < 1:
            raise InvalidShape("pool size and stride must be >= 1")
        object.__setattr__(self, "size", int(self.size))
        object.__setattr__(self, "stride", int(self.stride))

    kind = "maxpool"


Layer = Union[LinearLayer, ConvLayer, PoolLayer]


@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple
    input_shape: tuple
    dtype_tag: str = "f64"

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidShape("a model needs at least one layer")
        if self.dtype_tag not in ("f32", "f64"):
            raise InvalidShape(f"unknown dtype tag {self.dtype_tag!r}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def replace_layers(self, layers) -> "ModelGraph":
        return dataclasses.replace(self, layers=tuple(layers))


def is_weighted(layer) -> bool:
    return isinstance(layer, (LinearLayer, ConvLayer))


def flat_weights(layer) -> np.ndarray:
    """Weights in container order: A row-major, or the kernel as [P][C][kh][kw]."""
    if isinstance(layer, LinearLayer):
        return layer.weights.reshape(-1)
    if isinstance(layer, ConvLayer):
        return layer.kernel.reshape(-1)
    raise TypeError(f"{type(layer).__name__} carries no weights")


# --------------------------------------------------------------------------
# activations


def relu(z):
    return np.maximum(z, 0.0)


def softmax(z):
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def apply_activation(z, activation):
    activation = Activation(activation)
    if activation is Activation.IDENTITY:
        return z
    if activation is Activation.RELU:
        return relu(z)
    # softmax over the feature axis; conv outputs are normalised per flattened sample
    if z.ndim > 2:
        flat = z.reshape(z.shape[0], -1)
        return softmax(flat).reshape(z.shape)
    return softmax(z)


# --------------------------------------------------------------------------
# layer kernels


def linear_response(layer: LinearLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise DimensionMismatch(f"input length {x.shape[-1]} != weight rows {layer.in_dim}")
    return x @ layer.weights + layer.bias


def forward_linear(layer: LinearLayer, x) -> np.ndarray:
    """``x @ A + b`` followed by the layer's activation; ``x`` may be batched."""
    return apply_activation(linear_response(layer, x), layer.activation)


def conv_output_hw(layer: ConvLayer, h: int, w: int):
    top, bottom, left, right = layer.padding
    _, _, kh, kw = layer.kernel.shape
    ph, pw = h + top + bottom, w + left + right
    if ph < kh or pw < kw:
        raise EmptyOutput(f"kernel {kh}x{kw} exceeds padded input {ph}x{pw}")
    sh, sw = layer.stride
    return (ph - kh) // sh + 1, (pw - kw) // sw + 1


def conv_windows(layer: ConvLayer, x) -> np.ndarray:
    """Input patches of shape (B, C, H', W', kh, kw) for a batched (B, C, H, W) input."""
    top, bottom, left, right = layer.padding
    _, _, kh, kw = layer.kernel.shape
    conv_output_hw(layer, x.shape[2], x.shape[3])
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    sh, sw = layer.stride
    return win[:, :, ::sh, ::sw]


def _as_batch(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise DimensionMismatch(f"expected {ndim} or {ndim + 1} axes, got shape {x.shape}")


def conv_response(layer: ConvLayer, x) -> np.ndarray:
    xb, single = _as_batch(x, 3)
    if xb.shape[1] != layer.kernel.shape[1]:
        raise DimensionMismatch(
            f"input has {xb.shape[1]} channels, kernel expects {layer.kernel.shape[1]}"
        )
    win = conv_windows(layer, xb)
    out = np.tensordot(win, layer.kernel, axes=([1, 4, 5], [1, 2, 3]))  # B, H', W', P
    out = np.moveaxis(out, 3, 1) + layer.bias[None, :, None, None]
    return out[0] if single else out


def forward_conv(layer: ConvLayer, x) -> np.ndarray:
    """Cross-correlation plus bias, then activation.  ``x`` is (C, H, W) or batched."""
    out = conv_response(layer, x)
    if out.ndim == 3:
        return apply_activation(out[None], layer.activation)[0]
    return apply_activation(out, layer.activation)


def forward_pool(layer: PoolLayer, x) -> np.ndarray:
    xb, single = _as_batch(x, 3)
    h, w = xb.shape[2:]
    if h < layer.size or w < layer.size:
        raise EmptyOutput(f"pool window {layer.size} exceeds input {h}x{w}")
    win = sliding_window_view(xb, (layer.size, layer.size), axis=(2, 3))
    out = win[:, :, :: layer.stride, :: layer.stride].max(axis=(4, 5))
    return out[0] if single else out


# --------------------------------------------------------------------------
# whole-model inference


def _batched_input(model: ModelGraph, x):
    x = np.asarray(x, dtype=np.float64)
    shape = model.input_shape
    if x.shape == shape:
        return x[None], True
    if x.shape[1:] == shape:
        return x, False
    raise DimensionMismatch(f"input shape {x.shape} does not match model input {shape}")


def layer_step(layer, index, h):
    """Apply one layer to a batched activation, flattening for linear layers."""
    try:
        if isinstance(layer, LinearLayer):
            if h.ndim > 2:
                h = h.reshape(h.shape[0], -1)
            return forward_linear(layer, h)
        if h.ndim != 4:
            raise DimensionMismatch(f"{layer.kind} layer needs (C, H, W) input, got {h.shape[1:]}")
        if isinstance(layer, ConvLayer):
            return forward_conv(layer, h)
        return forward_pool(layer, h)
    except EclipseError as exc:
        if exc.layer_index is not None:
            raise
        raise type(exc)(str(exc), layer_index=index) from exc


def forward_model(model: ModelGraph, x) -> np.ndarray:
    """Run ``x`` (one sample of ``model.input_shape`` or a batch of them) through every layer."""
    h, single = _batched_input(model, x)
    for i, layer in enumerate(model.layers):
        h = layer_step(layer, i, h)
    if h.ndim > 2:
        h = h.reshape(h.shape[0], -1)
    return h[0] if single else h


def forward_until(model: ModelGraph, x, index: int) -> np.ndarray:
    """Batched activations arriving at layer ``index`` (its input)."""
    h, _ = _batched_input(model, x)
    for i, layer in enumerate(model.layers[:index]):
        h = layer_step(layer, i, h)
    return h


def infer_shapes(model: ModelGraph) -> list:
    """Per-layer output shapes; raises on the first incompatible layer."""
    shape = model.input_shape
    shapes = []
    for i, layer in enumerate(model.layers):
        try:
            if isinstance(layer, LinearLayer):
                size = int(np.prod(shape))
                if size != layer.in_dim:
                    raise DimensionMismatch(f"input length {size} != weight rows {layer.in_dim}")
                shape = (layer.out_dim,)
            elif len(shape) != 3:
                raise DimensionMismatch(f"{layer.kind} layer needs (C, H, W) input, got {shape}")
            elif isinstance(layer, ConvLayer):
                if shape[0] != layer.kernel.shape[1]:
                    raise DimensionMismatch(
                        f"input has {shape[0]} channels, kernel expects {layer.kernel.shape[1]}"
                    )
                shape = (layer.kernel.shape[0],) + conv_output_hw(layer, shape[1], shape[2])
            else:
                if shape[1] < layer.size or shape[2] < layer.size:
                    raise EmptyOutput(f"pool window {layer.size} exceeds input {shape[1:]}")
                shape = (
                    shape[0],
                    (shape[1] - layer.size) // layer.stride + 1,
                    (shape[2] - layer.size) // layer.stride + 1,
                )
        except EclipseError as exc:
            raise type(exc)(str(exc), layer_index=i) from exc
        shapes.append(shape)
    return shapes


@dataclass(frozen=True)
class EquivalenceReport:
    max_abs_dev: float
    top1_agreement: float
    probes: int

    def to_dict(self):
        return dataclasses.asdict(self)


def equivalence_report(m1: ModelGraph, m2: ModelGraph, probes: Sequence) -> EquivalenceReport:
    """Worst-case output deviation and argmax agreement over a probe batch."""
    probes = np.asarray(probes, dtype=np.float64)
    if probes.shape == m1.input_shape:
        probes = probes[None]
    y1 = forward_model(m1, probes)
    y2 = forward_model(m2, probes)
    if y1.shape != y2.shape:
        raise DimensionMismatch(f"model outputs differ in shape: {y1.shape} vs {y2.shape}")
    dev = float(np.max(np.abs(y1 - y2))) if y1.size else 0.0
    agree = float(np.mean(np.argmax(y1, axis=1) == np.argmax(y2, axis=1)))
    return EquivalenceReport(max_abs_dev=dev, top1_agreement=agree, probes=len(probes))
