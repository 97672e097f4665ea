"""Aggregating saliency maps over a decoy population."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError
from .decoy import Certificate, DecoyConfig, DecoySet, Mask, decoy_rng, resolve_epsilon
from .saliency import SaliencyMap, SaliencyParams, batch_saliency


class AggregationError(RuntimeError):
    pass


@dataclass
class AggregateResult:
    Z: SaliencyMap
    low: np.ndarray
    high: np.ndarray
    kind: str           # range | mean
    source: str         # optimized | constant | noise
    count: int


def decoy_maps(model, c: int, decoys: DecoySet, method: SaliencyParams) -> np.ndarray:
    used = decoys.usable()
    if len(used) < 2:
        raise AggregationError(
            f"only {len(used)} certified decoys (need 2); raise epsilon or the mask count n")
    return batch_saliency(model, used, c, method)


def range_of_maps(maps: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo, hi = maps.min(axis=0), maps.max(axis=0)
    return hi - lo, lo, hi


def dance_score(model, x, c: int, decoys: DecoySet, method: SaliencyParams) -> AggregateResult:
    """Per-feature range (max - min) of the decoy saliency maps."""
    maps = decoy_maps(model, c, decoys, method)
    Z, lo, hi = range_of_maps(maps)
    return AggregateResult(SaliencyMap(Z, method.method, c, extra={"aggregation": "range"}),
                           lo, hi, "range", decoys.source, len(maps))


def mean_aggregate(model, x, c: int, decoys: DecoySet, method: SaliencyParams) -> AggregateResult:
    maps = decoy_maps(model, c, decoys, method)
    return AggregateResult(SaliencyMap(maps.mean(axis=0), method.method, c, extra={"aggregation": "mean"}),
                           maps.min(axis=0), maps.max(axis=0), "mean", decoys.source, len(maps))


def baseline_decoys(model, x, kind: str, masks: list[Mask], config: DecoyConfig,
                    fill_value: float | None = None, sigma: float | None = None,
                    seed: int = 0) -> DecoySet:
    """Ablation decoys: masked features set to a constant, or jittered with
    Gaussian noise then clipped to the box. Two per mask (s = +1, -1) to
    mirror the optimized set; both constant decoys of a mask coincide.

    Their certificates report the actual layer deviation; they are never
    filtered by it.
    """
    x = np.asarray(x, np.float64)
    span = config.x_max - config.x_min
    if kind == "constant":
        if fill_value is None:
            raise ConfigError("constant baseline needs the dataset mean value")
    elif kind == "noise":
        sigma = 0.1 * span if sigma is None else float(sigma)
        if sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
    else:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    eps = resolve_epsilon(model, x, config) if model is not None else float(config.epsilon)
    ref = model.block(x[None], config.layer)[0] if model is not None else None
    decoys, ids, dirs, certs = [], [], [], []
    for mk in masks:
        M = mk.array > 0
        for s in (1, -1):
            if kind == "constant":
                xt = np.where(M, fill_value, x)
            else:
                rng = decoy_rng(seed, mk.id, s)
                xt = np.where(M, np.clip(x + rng.normal(0.0, 1.0, size=x.shape) * sigma,
                                         config.x_min, config.x_max), x)
                if sigma == 0:
                    xt = x.copy()
            dev = float(np.abs(model.block(xt[None], config.layer)[0] - ref).max()) if model is not None else 0.0
            obj = float(np.maximum((xt - x) * s, 0).sum())
            decoys.append(xt)
            ids.append(mk.id)
            dirs.append(s)
            certs.append(Certificate(dev, obj, dev <= eps + config.tol, eps))
    return DecoySet(x, np.stack(decoys), ids, dirs, certs, masks, config, eps, source=kind)
