"""Seeded synthetic models used by the tests, demos and the ``gen-fixture`` command.

Weights and biases follow the usual ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``
initialisation.  The toy CNN additionally gets a ridge-fitted output layer on
a small synthetic classification task, because the argmax of an untrained
network barely depends on its input and makes top-1 agreement meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.ndimage

from .model import Activation, ConvLayer, LinearLayer, ModelGraph, PoolLayer, forward_until

MLP_DIMS = (64, 128, 128, 64, 10)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def random_linear(rng, m, n, activation=Activation.RELU) -> LinearLayer:
    return LinearLayer(_uniform(rng, m, (m, n)), _uniform(rng, m, n), activation)


def random_conv(rng, p, c, k, padding=0, stride=1, activation=Activation.RELU) -> ConvLayer:
    fan_in = c * k * k
    return ConvLayer(
        _uniform(rng, fan_in, (p, c, k, k)),
        _uniform(rng, fan_in, p),
        (padding,) * 4,
        (stride, stride),
        activation,
    )


def random_mlp(seed, dims=MLP_DIMS, hidden=Activation.RELU, output=Activation.SOFTMAX) -> ModelGraph:
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        act = hidden if i < len(dims) - 2 else output
        layers.append(random_linear(rng, dims[i], dims[i + 1], act))
    return ModelGraph(tuple(layers), (dims[0],))


@dataclass(frozen=True, eq=False)
class PrototypeTask:
    """Classes are smooth random images; a sample is its prototype plus white noise."""

    prototypes: np.ndarray  # classes, H, W
    noise: float = 0.5

    @property
    def classes(self) -> int:
        return len(self.prototypes)

    def sample(self, count: int, seed=None):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, self.classes, size=count)
        x = self.prototypes[labels] + self.noise * rng.standard_normal((count,) + self.prototypes.shape[1:])
        return x[:, None], labels


def toy_task(seed, input_hw=16, classes=10, noise=0.5, smoothing=2.0) -> PrototypeTask:
    rng = np.random.default_rng([seed, 7])
    protos = np.stack(
        [scipy.ndimage.gaussian_filter(rng.standard_normal((input_hw, input_hw)), smoothing) for _ in range(classes)]
    )
    protos = (protos - protos.mean(axis=(1, 2), keepdims=True)) / protos.std(axis=(1, 2), keepdims=True)
    return PrototypeTask(protos, noise)


def fit_readout(model: ModelGraph, x, labels, ridge=1e-2, target=2.0) -> ModelGraph:
    """Refit the last (linear) layer by ridge regression onto +-``target`` one-hot codes."""
    last = model.layers[-1]
    if not isinstance(last, LinearLayer):
        raise TypeError("the last layer must be linear")
    feats = forward_until(model, x, len(model.layers) - 1).reshape(len(x), -1)
    Z = np.hstack([feats, np.ones((len(x), 1))])
    T = target * (2.0 * np.eye(last.out_dim)[labels] - 1.0)
    W = scipy.linalg.solve(Z.T @ Z + ridge * np.eye(Z.shape[1]), Z.T @ T, assume_a="pos")
    return model.replace_layers(model.layers[:-1] + (LinearLayer(W[:-1], W[-1], last.activation),))


def toy_cnn(seed, input_hw=16, channels=(32, 64), classes=10, fit=True, fit_samples=2000) -> ModelGraph:
    """Two 3x3 conv blocks with 2x2 pooling, then three linear layers.

    Layer indices: 0 conv, 1 pool, 2 conv, 3 pool, 4-6 linear.  With ``fit``
    the output layer is fitted to ``toy_task(seed)``.
    """
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    side = input_hw // 4
    layers = (
        random_conv(rng, c1, 1, 3, padding=1),
        PoolLayer(2, 2),
        random_conv(rng, c2, c1, 3, padding=1),
        PoolLayer(2, 2),
        random_linear(rng, c2 * side * side, 64),
        random_linear(rng, 64, 64),
        random_linear(rng, 64, classes, Activation.SOFTMAX),
    )
    model = ModelGraph(layers, (1, input_hw, input_hw))
    if fit:
        x, y = toy_task(seed, input_hw, classes).sample(fit_samples, [seed, 8])
        model = fit_readout(model, x, y)
    return model


def probe_batch(model: ModelGraph, count: int, seed=None, low=0.0, high=1.0) -> np.ndarray:
    """Uniform random inputs shaped for ``model``."""
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, size=(count,) + model.input_shape)
