"""Whole-model attack orchestration: pick target layers, dispatch per layer kind and mode.

Targets are processed from the highest original index down.  A transform at
layer ``i`` only touches layers ``i`` and later, so every target still sits at
its original index when its turn comes, and an advanced merge into layer
``i + 1`` always lands on a layer that has already been obfuscated.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import EclipseError, NotEligible
from .model import (
    ConvLayer,
    LinearLayer,
    ModelGraph,
    equivalence_report,
    forward_model,
    infer_shapes,
    is_weighted,
)
from .obf_conv import DEFAULT_LAMBDA_RANGE, FrameSpec, NoiseConfig, advanced_obfuscate_conv, base_obfuscate_conv
from .obf_linear import advanced_obfuscate_linear, base_obfuscate_linear
from .watermark import STRATEGIES, active_verify, verify


class Mode(str, Enum):
    BASE = "base"
    ADVANCED = "advanced"


def layer_seed(master: int, index: int) -> int:
    """Seed for one layer, a function of the master seed and the layer's original index only."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, np.uint32)[0])


@dataclass(frozen=True)
class ObfuscationPlan:
    targets: tuple
    mode: Mode = Mode.BASE
    seed: int = 0
    h: int = None  # None means 2 * out_dim
    frame: FrameSpec = FrameSpec()
    noise: NoiseConfig = NoiseConfig()
    lambda_range: tuple = DEFAULT_LAMBDA_RANGE
    relu_camouflage: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "targets", tuple(sorted({int(t) for t in self.targets})))

    def seed_for(self, index: int) -> int:
        return layer_seed(self.seed, index)


def plan_for(model: ModelGraph, detection=None, mode=Mode.BASE, seed=0, **params) -> ObfuscationPlan:
    """Plan over the detected layers, or over every weighted layer when ``detection`` is empty."""
    if not detection:
        targets = [i for i, layer in enumerate(model.layers) if is_weighted(layer)]
    else:
        targets = list(detection)
        for t in targets:
            if not 0 <= t < len(model.layers):
                raise IndexError(f"target {t} out of range for {len(model.layers)} layers")
            if not is_weighted(model.layers[t]):
                raise NotEligible(f"{model.layers[t].kind} layers cannot be obfuscated", layer_index=t)
    return ObfuscationPlan(tuple(targets), mode, seed, **params)


def _apply(model, i, plan, log):
    layer = model.layers[i]
    seed = plan.seed_for(i)
    if isinstance(layer, LinearLayer):
        if plan.mode is Mode.BASE:
            return base_obfuscate_linear(model, i, plan.h, seed, plan.relu_camouflage, log)
        return advanced_obfuscate_linear(model, i, plan.h, seed, log)
    if isinstance(layer, ConvLayer):
        if plan.mode is Mode.BASE:
            return base_obfuscate_conv(model, i, plan.frame, log)
        cfg = dataclasses.replace(plan.noise, seed=seed)
        return advanced_obfuscate_conv(model, i, plan.frame, cfg, plan.lambda_range, h=plan.h, log=log)
    raise NotEligible(f"{layer.kind} layers cannot be obfuscated", layer_index=i)


def execute(model: ModelGraph, plan: ObfuscationPlan):
    """Apply ``plan``; returns ``(model, log)``.  The input model is never modified."""
    log = []
    out = model
    targets = set(plan.targets)
    for i in sorted(targets, reverse=True):
        entries = []
        try:
            out = _apply(out, i, plan, entries)
        except EclipseError as exc:
            if exc.layer_index is None:
                raise type(exc)(str(exc), layer_index=i) from exc
            raise
        for entry in entries:
            entry["target"] = i
            if plan.mode is Mode.ADVANCED and entry["op"] == "advanced_linear" and i + 1 in targets:
                # the successor was obfuscated first, so the merge absorbs its F1 layer
                entry["merged_into_obfuscated_successor"] = True
        log.extend(entries)
    infer_shapes(out)
    return out, log


def run(model: ModelGraph, detection=None, mode=Mode.BASE, seed=0, **params):
    """Obfuscate the detected layers (all weighted layers if none); returns ``(model, log)``."""
    return execute(model, plan_for(model, detection, mode, seed, **params))


# --------------------------------------------------------------------------
# reporting


def param_count(model: ModelGraph) -> int:
    total = 0
    for layer in model.layers:
        if isinstance(layer, LinearLayer):
            total += layer.weights.size + layer.bias.size
        elif isinstance(layer, ConvLayer):
            total += layer.kernel.size + layer.bias.size
    return total


def forward_times(model: ModelGraph, probes, runs=20) -> list:
    probes = np.asarray(probes, dtype=np.float64)
    forward_model(model, probes)  # warm-up
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        forward_model(model, probes)
        times.append(time.perf_counter() - t0)
    return times


def runtime_ratio(original: ModelGraph, obfuscated: ModelGraph, probes, runs=20) -> dict:
    """Median forward time of each model, interleaving runs so drift hits both alike."""
    probes = np.asarray(probes, dtype=np.float64)
    a, b = [], []
    for _ in range(runs):
        a += forward_times(original, probes, 1)
        b += forward_times(obfuscated, probes, 1)
    ta, tb = float(np.median(a)), float(np.median(b))
    return {"runs": runs, "original_s": ta, "obfuscated_s": tb, "ratio": tb / ta}


@dataclass
class MarkedKey:
    """A key, the owner's message and a label used in reports."""

    key: object
    message: np.ndarray
    label: str = field(default="")


def attack_report(original, obfuscated, keys, probes, delta=None, strategies=STRATEGIES, timing_runs=0) -> dict:
    """Confidence before and after the attack for each key, plus utility and size deltas.

    ``keys`` holds ``MarkedKey`` items or ``(key, message)`` pairs.  Timing is
    left out unless ``timing_runs`` is positive, so the report is reproducible
    byte for byte by default.
    """
    rows = []
    for item in keys:
        if not isinstance(item, MarkedKey):
            item = MarkedKey(*item)
        key, msg = item.key, item.message
        row = {"label": item.label or f"{key.scheme.value}@{key.layer_index}", "scheme": key.scheme.value,
               "layer": key.layer_index}
        for name, m in (("before", original), ("after", obfuscated)):
            passive = verify(m, key, msg, delta)
            best, trace = active_verify(m, key, msg, delta, strategies)
            row[name] = {"passive": passive.to_dict(), "active": best.to_dict(), "trace": trace}
        rows.append(row)
    report = {
        "utility": equivalence_report(original, obfuscated, probes).to_dict(),
        "layers": {"original": len(original.layers), "obfuscated": len(obfuscated.layers)},
        "parameters": {"original": param_count(original), "obfuscated": param_count(obfuscated)},
        "watermarks": rows,
    }
    if timing_runs > 0:
        report["runtime"] = runtime_ratio(original, obfuscated, probes, timing_runs)
    return report
