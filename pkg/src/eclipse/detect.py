"""Frequency-domain scoring of weight layers.

Each linear or conv layer is flattened in container order, transformed with a
DFT, and the real and imaginary spectra are smoothed with a simple moving
average.  The volatility of a layer is the population standard deviation of
the first differences of that SMA series; unusually calm layers are flagged as
likely watermark carriers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, SeriesTooShort, WindowTooLarge
from .model import ModelGraph, flat_weights, is_weighted

DEFAULT_WINDOW = 1000
DEFAULT_QUANTILE = 0.25
DEFAULT_TRIM = 0.02


@dataclass(frozen=True)
class FrequencySpectrum:
    real_part: np.ndarray
    imag_part: np.ndarray

    @property
    def length(self) -> int:
        return len(self.real_part)


@dataclass(frozen=True)
class SmaSeries:
    values: np.ndarray
    window: int


def dft_direct(x) -> np.ndarray:
    """O(f^2) reference DFT, kept as an independent oracle for the FFT path."""
    x = np.asarray(x, dtype=np.float64)
    f = len(x)
    k = np.arange(f)
    return np.exp(-2j * np.pi * np.outer(k, k) / f) @ x


def layer_spectrum(layer_weights) -> FrequencySpectrum:
    w = np.asarray(layer_weights, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise EmptyInput("cannot transform an empty weight vector")
    X = np.fft.fft(w)
    return FrequencySpectrum(X.real.copy(), X.imag.copy())


def sma(series, r: int) -> SmaSeries:
    """Trailing simple moving average; the output has ``len(series) - r + 1`` points."""
    series = np.asarray(series, dtype=np.float64)
    if r < 1:
        raise WindowTooLarge(f"window must be >= 1, got {r}")
    if r > len(series):
        raise WindowTooLarge(f"window {r} exceeds series length {len(series)}")
    if r == 1:
        return SmaSeries(series.copy(), 1)
    values = np.convolve(series, np.full(r, 1.0 / r), mode="valid")
    return SmaSeries(values, r)


def volatility_score(series: SmaSeries) -> float:
    values = series.values
    if len(values) < 2:
        raise SeriesTooShort(f"need at least 2 SMA points, got {len(values)}")
    return float(np.std(np.diff(values)))


@dataclass(frozen=True)
class FrequencyReport:
    layer_index: int
    kind: str
    f: int
    r_used: int
    r_clamped: bool
    vol_real: float
    vol_imag: float
    flagged: bool = False
    spectrum: FrequencySpectrum = dataclasses.field(default=None, repr=False, compare=False)
    sma_real: SmaSeries = dataclasses.field(default=None, repr=False, compare=False)
    sma_imag: SmaSeries = dataclasses.field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "index": self.layer_index,
            "kind": self.kind,
            "f": self.f,
            "r_used": self.r_used,
            "r_clamped": self.r_clamped,
            "vol_real": self.vol_real,
            "vol_imag": self.vol_imag,
            "flagged": self.flagged,
        }


def _trim(part, trim):
    k = int(np.floor(trim * len(part)))
    return part[k : len(part) - k] if len(part) - 2 * k >= 3 else part


def score_layer(index, layer, window=DEFAULT_WINDOW, trim=DEFAULT_TRIM) -> FrequencyReport:
    w = flat_weights(layer)
    spectrum = layer_spectrum(w)
    real = _trim(spectrum.real_part, trim)
    imag = _trim(spectrum.imag_part, trim)
    # keep at least three SMA points so the difference series has a spread
    r_used = max(1, min(window, len(real) - 2))
    sma_real, sma_imag = sma(real, r_used), sma(imag, r_used)
    return FrequencyReport(
        layer_index=index,
        kind=layer.kind,
        f=spectrum.length,
        r_used=r_used,
        r_clamped=r_used < window,
        vol_real=volatility_score(sma_real) if len(sma_real.values) >= 2 else 0.0,
        vol_imag=volatility_score(sma_imag) if len(sma_imag.values) >= 2 else 0.0,
        spectrum=spectrum,
        sma_real=sma_real,
        sma_imag=sma_imag,
    )


@dataclass(frozen=True)
class DetectionResult:
    flagged: list
    reports: list
    window: int
    quantile: float
    trim: float

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "quantile": self.quantile,
            "trim": self.trim,
            "rule": "flag if vol_real or vol_imag <= q-quantile across eligible layers",
            "flagged": list(self.flagged),
            "layers": [r.to_dict() for r in self.reports],
        }


def detect_watermarked_layers(
    model: ModelGraph, window=DEFAULT_WINDOW, quantile=DEFAULT_QUANTILE, trim=DEFAULT_TRIM
) -> DetectionResult:
    """Score every linear/conv layer and flag the calmest ones.

    A layer is flagged when either its real or imaginary volatility is at or
    below the ``quantile`` of that score across all eligible layers.
    """
    reports = [
        score_layer(i, layer, window, trim) for i, layer in enumerate(model.layers) if is_weighted(layer)
    ]
    if not reports:
        return DetectionResult([], [], window, quantile, trim)
    vr = np.array([r.vol_real for r in reports])
    vi = np.array([r.vol_imag for r in reports])
    qr, qi = np.quantile(vr, quantile), np.quantile(vi, quantile)
    final = []
    for rep, a, b in zip(reports, vr, vi):
        final.append(dataclasses.replace(rep, flagged=bool(a <= qr or b <= qi)))
    return DetectionResult(
        [r.layer_index for r in final if r.flagged], final, window, quantile, trim
    )
