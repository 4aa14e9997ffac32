"""Convolutional obfuscation: kernel frames, frame noise and lambda rescaling.

Padding every kernel with a frame and widening the layer's input padding by
the same frame leaves every output element unchanged when the frame is zero,
because each new kernel tap multiplies an input value at a position the
original kernel never touched.  The advanced variant fills the frame with a
per-feature-map noise value ``eps`` and multiplies the whole layer by a
positive ``lam``, which the next weighted layer divides back out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidShape, NoSuccessor, NotConv, NotEligible
from .model import Activation, ConvLayer, LinearLayer, ModelGraph, PoolLayer
from .obf_linear import gen_invertible_pair


@dataclass(frozen=True)
class FrameSpec:
    top: int = 1
    bottom: int = 1
    left: int = 1
    right: int = 1

    def __post_init__(self):
        if min(self.top, self.bottom, self.left, self.right) < 0:
            raise InvalidShape(f"frame widths must be non-negative: {self}")

    @classmethod
    def uniform(cls, width: int) -> "FrameSpec":
        return cls(width, width, width, width)

    def as_tuple(self):
        return (self.top, self.bottom, self.left, self.right)

    @property
    def trivial(self) -> bool:
        return not any(self.as_tuple())


@dataclass(frozen=True)
class NoiseConfig:
    beta: float = 10.0
    mu: float = 0.33
    sigma: float = 0.1
    mode: str = "min"
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0 or self.sigma < 0:
            raise ValueError("beta and sigma must be non-negative")
        if self.mode not in ("min", "median"):
            raise ValueError(f"mode must be 'min' or 'median', got {self.mode!r}")


DEFAULT_LAMBDA_RANGE = (0.5, 2.0)
LAMBDA_EXCLUSION = (0.95, 1.05)


def _require_conv(model, i):
    if not 0 <= i < len(model.layers):
        raise IndexError(f"layer index {i} out of range for {len(model.layers)} layers")
    layer = model.layers[i]
    if not isinstance(layer, ConvLayer):
        raise NotConv(f"expected a conv layer, found {layer.kind}", layer_index=i)
    return layer


def pad_kernel(kernel, frame: FrameSpec, value=0.0) -> np.ndarray:
    """Surround each (kh, kw) kernel slice with the frame; ``value`` may vary per feature map."""
    kernel = np.asarray(kernel, dtype=np.float64)
    t, b, l, r = frame.as_tuple()
    P, C, kh, kw = kernel.shape
    out = np.empty((P, C, kh + t + b, kw + l + r))
    out[...] = np.reshape(np.broadcast_to(value, (P,)), (P, 1, 1, 1))
    out[:, :, t : t + kh, l : l + kw] = kernel
    return out


def _widened_padding(layer, frame):
    return tuple(p + f for p, f in zip(layer.padding, frame.as_tuple()))


def base_obfuscate_conv(model: ModelGraph, i: int, frame: FrameSpec = FrameSpec(), log=None) -> ModelGraph:
    """Zero-frame every kernel of conv layer ``i`` and widen its input padding to match.

    Exact for any stride: the extra input padding shifts the sampling grid by
    the same amount the frame shifts the kernel taps.
    """
    layer = _require_conv(model, i)
    new = ConvLayer(
        pad_kernel(layer.kernel, frame),
        layer.bias,
        _widened_padding(layer, frame),
        layer.stride,
        layer.activation,
    )
    layers = list(model.layers)
    layers[i] = new
    if log is not None:
        log.append({"op": "base_conv", "layer": i, "frame": list(frame.as_tuple())})
    return model.replace_layers(layers)


def compute_frame_noise(kernel_p, cfg: NoiseConfig, index: int = 0) -> float:
    """``beta * stat(|K^p|) * g`` with ``g ~ N(mu, sigma^2)``.

    ``g`` comes from a generator keyed on ``(cfg.seed, 0, index)``, so the draw for
    a feature map does not depend on evaluation order or on ``cfg.mode``.
    """
    mags = np.abs(np.asarray(kernel_p, dtype=np.float64))
    if mags.size == 0:
        raise InvalidShape("kernel slice is empty")
    stat = np.min(mags) if cfg.mode == "min" else np.median(mags)
    g = np.random.default_rng([cfg.seed, 0, index]).normal(cfg.mu, cfg.sigma)
    return float(cfg.beta * stat * g) + 0.0  # no negative zeros


def draw_lambda(rng, lambda_range=DEFAULT_LAMBDA_RANGE, exclusion=LAMBDA_EXCLUSION) -> float:
    lo, hi = lambda_range
    if not 0 < lo <= hi:
        raise ValueError(f"lambda range must be positive and ordered, got {lambda_range}")
    ex_lo, ex_hi = exclusion
    if ex_lo <= lo and hi <= ex_hi:
        raise ValueError("lambda range lies entirely inside the exclusion band")
    while True:
        lam = float(rng.uniform(lo, hi))
        if not ex_lo < lam < ex_hi:
            return lam


def find_successor(model: ModelGraph, i: int) -> int:
    """Index of the next weighted layer, provided only pooling lies in between."""
    for j in range(i + 1, len(model.layers)):
        layer = model.layers[j]
        if isinstance(layer, (ConvLayer, LinearLayer)):
            return j
        if not isinstance(layer, PoolLayer):
            break
    raise NoSuccessor("no linear or conv layer follows to absorb the rescaling", layer_index=i)


def advanced_obfuscate_conv(
    model: ModelGraph,
    i: int,
    frame: FrameSpec = FrameSpec(),
    cfg: NoiseConfig = NoiseConfig(),
    lambda_range=DEFAULT_LAMBDA_RANGE,
    lam=None,
    h=None,
    log=None,
) -> ModelGraph:
    """Noise-filled frame plus ``lam`` rescaling of conv layer ``i``.

    The successor conv kernel is divided by ``lam`` (its bias is left alone).
    A linear successor is split with an identity pair whose product is
    ``I / lam``.  Pass ``lam`` to override the random draw.
    """
    layer = _require_conv(model, i)
    if layer.activation is Activation.SOFTMAX:
        raise NotEligible("softmax does not commute with rescaling", layer_index=i)
    j = find_successor(model, i)
    rng = np.random.default_rng([cfg.seed, 1])
    if lam is None:
        lam = draw_lambda(rng, lambda_range)
    if lam <= 0:
        raise ValueError("lambda must be positive to commute with ReLU and max pooling")
    eps = np.array([compute_frame_noise(layer.kernel[p], cfg, p) for p in range(layer.kernel.shape[0])])
    kernel = pad_kernel(layer.kernel, frame, eps) * lam
    layers = list(model.layers)
    layers[i] = ConvLayer(kernel, layer.bias * lam, _widened_padding(layer, frame), layer.stride, layer.activation)
    succ = layers[j]
    entry = {
        "op": "advanced_conv",
        "layer": i,
        "frame": list(frame.as_tuple()),
        "lambda": lam,
        "eps_per_map": [float(e) for e in eps],
        "mode": cfg.mode,
        "seed": cfg.seed,
        "successor": j,
    }
    if isinstance(succ, ConvLayer):
        layers[j] = ConvLayer(succ.kernel / lam, succ.bias, succ.padding, succ.stride, succ.activation)
        entry["compensation"] = "conv_divide"
    else:
        n = succ.out_dim
        h = 2 * n if h is None else int(h)
        pair = gen_invertible_pair(n, h, rng).scaled(1.0 / lam)
        layers[j : j + 1] = [
            LinearLayer(succ.weights @ pair.H, np.zeros(h), Activation.IDENTITY),
            LinearLayer(pair.H_inv, succ.bias, succ.activation),
        ]
        entry["compensation"] = "linear_split"
        entry["h"] = h
    if log is not None:
        log.append(entry)
    return model.replace_layers(layers)
