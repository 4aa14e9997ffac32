"""Linear-layer obfuscation through rectangular identity pairs.

A full-row-rank ``H`` of shape ``(n, h)`` with ``h > n`` has the right inverse
``H^T (H H^T)^-1``, so a layer ``x A + b`` can be rewritten as two layers
``x (A H)`` then ``(.) H_inv + b`` without changing its output.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidShape, NotLinear, RankDeficient
from .model import Activation, LinearLayer, ModelGraph

RANK_TOL = 1e-10
MAX_RESAMPLES = 8
CAMOUFLAGE_TRIES = 32


@dataclass(frozen=True, eq=False)
class InvertiblePair:
    H: np.ndarray
    H_inv: np.ndarray

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def h(self) -> int:
        return self.H.shape[1]

    def residual(self) -> float:
        """Induced infinity norm of ``H @ H_inv - I``."""
        err = self.H @ self.H_inv - np.eye(self.n)
        return float(np.max(np.sum(np.abs(err), axis=1)))

    def scaled(self, factor: float) -> "InvertiblePair":
        """Pair whose product is ``factor * I``."""
        return InvertiblePair(self.H, self.H_inv * factor)


def right_inverse(H) -> np.ndarray:
    """``H^T (H H^T)^-1`` for a full-row-rank ``H``."""
    H = np.asarray(H, dtype=np.float64)
    gram = H @ H.T
    # solve(gram, H) = gram^-1 H, and gram is symmetric
    return scipy.linalg.solve(gram, H, assume_a="pos").T


def pair_from_matrix(H) -> InvertiblePair:
    H = np.array(H, dtype=np.float64)
    n, h = H.shape
    if h <= n:
        raise InvalidShape(f"H must be wide (h > n), got {n}x{h}")
    smallest = np.linalg.svd(H, compute_uv=False)[-1]
    if smallest <= RANK_TOL:
        raise RankDeficient(f"smallest singular value {smallest:.3g} <= {RANK_TOL}")
    return InvertiblePair(H, right_inverse(H))


def gen_invertible_pair(n: int, h: int, seed=None) -> InvertiblePair:
    """Random ``H`` with i.i.d. U[-1, 1] entries and its right inverse."""
    if n < 1 or h <= n:
        raise InvalidShape(f"need h > n >= 1, got n={n}, h={h}")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RESAMPLES):
        H = rng.uniform(-1.0, 1.0, size=(n, h))
        try:
            return pair_from_matrix(H)
        except (RankDeficient, np.linalg.LinAlgError):
            continue
    raise RankDeficient(f"no full-rank {n}x{h} draw after {MAX_RESAMPLES} attempts")


def _require_linear(model, i):
    if not 0 <= i < len(model.layers):
        raise IndexError(f"layer index {i} out of range for {len(model.layers)} layers")
    layer = model.layers[i]
    if not isinstance(layer, LinearLayer):
        raise NotLinear(f"expected a linear layer, found {layer.kind}", layer_index=i)
    return layer


def _camouflaged_pair(A, n, h, rng):
    for _ in range(CAMOUFLAGE_TRIES):
        pair = gen_invertible_pair(n, h, rng)
        if np.all(A @ pair.H >= 0):
            return pair, True
    warnings.warn(
        f"no H with A @ H >= 0 found in {CAMOUFLAGE_TRIES} draws; F1 keeps an identity activation",
        RuntimeWarning,
        stacklevel=3,
    )
    return pair, False


def base_obfuscate_linear(
    model: ModelGraph, i: int, h=None, seed=None, relu_camouflage=False, log=None
) -> ModelGraph:
    """Split linear layer ``i`` into ``x (A H)`` followed by ``(.) H_inv + b``.

    With ``relu_camouflage`` the split layer also gets a ReLU when its input is
    non-negative (the previous layer ends in ReLU) and some ``H`` makes
    ``A @ H`` non-negative, so the extra ReLU is a no-op.
    """
    layer = _require_linear(model, i)
    n = layer.out_dim
    h = 2 * n if h is None else int(h)
    rng = np.random.default_rng(seed)
    first_act = Activation.IDENTITY
    if relu_camouflage:
        prev = model.layers[i - 1] if i > 0 else None
        pair, ok = _camouflaged_pair(layer.weights, n, h, rng)
        if ok and getattr(prev, "activation", None) is Activation.RELU:
            first_act = Activation.RELU
    else:
        pair = gen_invertible_pair(n, h, rng)
    f1 = LinearLayer(layer.weights @ pair.H, np.zeros(h), first_act)
    f2 = LinearLayer(pair.H_inv, layer.bias, layer.activation)
    layers = list(model.layers)
    layers[i : i + 1] = [f1, f2]
    if log is not None:
        log.append(
            {
                "op": "base_linear",
                "layer": i,
                "h": h,
                "seed": _seed_repr(seed),
                "dropped_activation": None,
                "pair_residual": pair.residual(),
            }
        )
    return model.replace_layers(layers)


def advanced_obfuscate_linear(model: ModelGraph, i: int, h=None, seed=None, log=None) -> ModelGraph:
    """Keep ``x (A H)`` at layer ``i`` and fold ``H_inv`` and ``b`` into layer ``i + 1``.

    The successor becomes ``(H_inv A') `` with bias ``b A' + b'``.  The
    activation that sat between the two layers is dropped (recorded in the
    log), so the rewrite is exact only when that activation is the identity.
    When layer ``i + 1`` is missing or not linear, an identity layer carrying
    layer ``i``'s activation is inserted first, which keeps the result exact.
    """
    layer = _require_linear(model, i)
    layers = list(model.layers)
    synthesized = i + 1 >= len(layers) or not isinstance(layers[i + 1], LinearLayer)
    if synthesized:
        n = layer.out_dim
        layers[i : i + 1] = [
            LinearLayer(layer.weights, layer.bias, Activation.IDENTITY),
            LinearLayer(np.eye(n), np.zeros(n), layer.activation),
        ]
        layer = layers[i]
    nxt = layers[i + 1]
    n = layer.out_dim
    h = 2 * n if h is None else int(h)
    pair = gen_invertible_pair(n, h, seed)
    dropped = None if layer.activation is Activation.IDENTITY else layer.activation.value
    layers[i] = LinearLayer(layer.weights @ pair.H, np.zeros(h), Activation.IDENTITY)
    layers[i + 1] = LinearLayer(
        pair.H_inv @ nxt.weights, layer.bias @ nxt.weights + nxt.bias, nxt.activation
    )
    if log is not None:
        log.append(
            {
                "op": "advanced_linear",
                "layer": i,
                "h": h,
                "seed": _seed_repr(seed),
                "dropped_activation": dropped,
                "synthesized_successor": synthesized,
                "pair_residual": pair.residual(),
            }
        )
    return model.replace_layers(layers)


def _seed_repr(seed):
    if seed is None or isinstance(seed, (int, np.integer)):
        return None if seed is None else int(seed)
    return str(seed)
