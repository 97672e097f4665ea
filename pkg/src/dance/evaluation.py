"""Fidelity, sensitivity, ground-truth overlap and report assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .model import config_hash
from .saliency import topk_binarize

P_FLOOR = 1e-12
REPORT_SCHEMA = 1


def fidelity(model, x, binary_map, c: int | None = None) -> tuple[float, bool]:
    """``-ln p_c(map * x)`` with ``c`` the class predicted on the unmasked x.

    Returns (score, clamped): probabilities below 1e-12 are clamped and
    flagged.
    """
    x = np.asarray(x, np.float64)
    if c is None:
        c = int(np.argmax(model.probabilities(x[None])[0]))
    p = float(model.probabilities((np.asarray(binary_map) * x)[None])[0][c])
    clamped = p < P_FLOOR
    return -np.log(max(p, P_FLOOR)), clamped


def fidelity_score(model, x, binary_map, c=None) -> float:
    return fidelity(model, x, binary_map, c)[0]


def l1_normalize(m: np.ndarray) -> np.ndarray:
    s = np.abs(m).sum()
    return m / s if s > 0 else np.asarray(m, np.float64)


def sensitivity(map_x, map_xhat, x, x_hat, normalize: str | None = "l1", fraction: float = 0.2) -> float:
    """``||E(x) - E(x_hat)||_2 / ||x - x_hat||_2``.

    normalize: ``"l1"`` divides each map by its L1 norm first; ``"topk"``
    compares top-K binarized maps; ``None`` uses the raw maps.
    """
    x, x_hat = np.asarray(x, np.float64), np.asarray(x_hat, np.float64)
    denom = np.linalg.norm((x - x_hat).ravel())
    if denom == 0:
        raise ValueError("sensitivity is undefined for x == x_hat")
    a, b = np.asarray(map_x, np.float64), np.asarray(map_xhat, np.float64)
    if normalize == "l1":
        a, b = l1_normalize(a), l1_normalize(b)
    elif normalize == "topk":
        a, b = topk_binarize(a, fraction), topk_binarize(b, fraction)
    elif normalize is not None:
        raise ValueError(f"unknown normalization {normalize!r}")
    return float(np.linalg.norm((a - b).ravel()) / denom)


def ground_truth_overlap(binary_map, truth_mask) -> float:
    """Fraction of truly important features that the binary map retains."""
    t = np.asarray(truth_mask) > 0
    if not t.any():
        raise ValueError("ground-truth mask is empty")
    return float(((np.asarray(binary_map) > 0) & t).sum() / t.sum())


def bootstrap_ci(values, seed: int = 0, n_boot: int = 1000, level: float = 0.95) -> list:
    """Percentile bootstrap interval for the median."""
    v = np.asarray(values, np.float64)
    rng = np.random.default_rng(seed)
    meds = np.median(v[rng.integers(0, len(v), size=(n_boot, len(v)))], axis=1)
    a = (1 - level) / 2
    return [float(np.quantile(meds, a)), float(np.quantile(meds, 1 - a))]


def summarize(values) -> dict:
    v = np.asarray(values, np.float64)
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return {"median": float(med), "iqr": [float(q1), float(q3)], "n": int(len(v))}


@dataclass
class EvalReport:
    records: list
    summary: dict
    config: dict = field(default_factory=dict)
    seed: int = 0
    invocation: list = field(default_factory=list)
    context: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "schema": REPORT_SCHEMA,
            "tool_version": __version__,
            "config_hash": config_hash(self.config),
            "seed": self.seed,
            "config": self.config,
            "invocation": self.invocation,
            "summary": self.summary,
            "context": self.context,
            "records": self.records,
        }

    def dumps(self) -> str:
        return json.dumps(_round(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())


def _round(obj):
    # repr of float64 is exact and stable; only normalize numpy scalars
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def assemble_report(records: list, config: dict | None = None, seed: int = 0,
                    invocation: list | None = None, keys=("fidelity", "sensitivity", "overlap")) -> EvalReport:
    """Group records by (method, aggregation[, attack]) and summarize each
    numeric key with median and inter-quartile range."""
    if not records:
        raise ValueError("cannot assemble a report from zero records")
    records = sorted(records, key=lambda r: (str(r.get("image", "")), str(r.get("method", "")),
                                             str(r.get("aggregation", "")), str(r.get("attack", ""))))
    groups: dict = {}
    for r in records:
        name = "/".join(str(r[k]) for k in ("method", "aggregation", "attack") if r.get(k) is not None)
        groups.setdefault(name or "all", []).append(r)
    summary = {}
    for name, rs in sorted(groups.items()):
        entry = {}
        for key in keys:
            vals = [r[key] for r in rs if r.get(key) is not None]
            if vals:
                entry[key] = summarize(vals)
        summary[name] = entry
    return EvalReport(records, summary, config or {}, seed, invocation or [])
