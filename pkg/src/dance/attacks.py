"""Iterative attacks on saliency maps that keep the predicted class.

Each step moves the input by ``step * sign(grad)`` on the attack objective,
then projects onto the l-infinity ball around x and the value box. A step
that flips the predicted class is rolled back and the step size halved.

The attack objectives act on ``|E(x)|``. For ReLU networks the input
Hessian vanishes almost everywhere, so the ascent direction is computed on a
softplus copy of the network (``softplus_beta``); objectives, class checks
and the returned maps always use the real network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, ball_bounds
from .model import predict
from .saliency import SaliencyParams, batch_saliency, saliency_vjp, topk_count, topk_indices

KINDS = ("topk", "target", "mass-center")


class AttackError(RuntimeError):
    pass


@dataclass
class AttackSpec:
    kind: str = "topk"
    epsilon: float = 0.05
    step: float = 0.01
    iterations: int = 50
    k: int | None = None                 # default: 20% of features
    region: tuple | None = None          # (row0, row1, col0, col1); default bottom-right quarter
    method: SaliencyParams = field(default_factory=SaliencyParams)
    seed: int = 0
    softplus_beta: float = 10.0
    fd_step: float = 1e-3
    x_min: float = 0.0
    x_max: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigError("attack budget must be >= 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")

    def to_dict(self):
        return {"kind": self.kind, "epsilon": self.epsilon, "step": self.step,
                "iterations": self.iterations, "k": self.k,
                "region": None if self.region is None else list(self.region),
                "method": self.method.to_dict(), "seed": self.seed,
                "softplus_beta": self.softplus_beta, "fd_step": self.fd_step,
                "x_min": self.x_min, "x_max": self.x_max}


@dataclass
class AttackResult:
    x_hat: np.ndarray
    trace: list
    objective: float
    label_preserved: bool
    linf: float
    delta: np.ndarray
    map_x: np.ndarray
    map_x_hat: np.ndarray
    kind: str = ""

    def to_dict(self):
        return {"kind": self.kind, "objective": self.objective, "trace": list(self.trace),
                "label_preserved": self.label_preserved, "linf": self.linf}


def _plane(E: np.ndarray) -> np.ndarray:
    """Magnitude map over the spatial plane (channels summed)."""
    a = np.abs(E)
    if a.ndim == 3:
        return a.sum(axis=0)
    if a.ndim == 1:
        return a[None]
    return a


def mass_center(smap) -> np.ndarray:
    """Centroid (row, col) of ``|map|`` in pixel units."""
    w = _plane(np.asarray(smap, np.float64))
    total = w.sum()
    if total == 0:
        raise ValueError("mass center of an all-zero map is undefined")
    rows, cols = np.indices(w.shape)
    return np.array([(rows * w).sum() / total, (cols * w).sum() / total])


def default_region(shape) -> tuple:
    H, W = shape[-2], shape[-1]
    return (H // 2, H, W // 2, W)


def _region_mask(shape, region) -> np.ndarray:
    r0, r1, c0, c1 = region
    H, W = shape[-2], shape[-1]
    if not (0 <= r0 < r1 <= H and 0 <= c0 < c1 <= W):
        raise ConfigError(f"target region {region} outside a {H}x{W} image")
    m = np.zeros(shape)
    m[..., r0:r1, c0:c1] = 1.0
    return m


class _Objective:
    """Attack objective (to maximize) and its gradient with respect to the map."""

    def __init__(self, spec: AttackSpec, E0: np.ndarray):
        self.kind = spec.kind
        self.shape = E0.shape
        if spec.kind == "topk":
            k = spec.k if spec.k is not None else topk_count(0.2, E0.size)
            if not 1 <= k <= E0.size:
                raise ConfigError(f"k={k} outside [1, {E0.size}]")
            sel = np.zeros(E0.size)
            sel[topk_indices(np.abs(E0), k)] = 1.0
            self.weight = sel.reshape(E0.shape)
        elif spec.kind == "target":
            if len(E0.shape) < 2:
                raise ConfigError("target attack needs an image-shaped input")
            self.weight = _region_mask(E0.shape, spec.region or default_region(E0.shape))
        else:
            if len(E0.shape) < 2:
                raise ConfigError("mass-center attack needs an image-shaped input")
            self.center0 = mass_center(E0)

    def value(self, E: np.ndarray) -> float:
        if self.kind == "topk":
            return -float((self.weight * np.abs(E)).sum())
        if self.kind == "target":
            return float((self.weight * np.abs(E)).sum())
        return float(np.linalg.norm(mass_center(E) - self.center0))

    def grad(self, E: np.ndarray) -> np.ndarray:
        sign = np.sign(E)
        if self.kind == "topk":
            return -self.weight * sign
        if self.kind == "target":
            return self.weight * sign
        w = _plane(E)
        total = w.sum()
        if total == 0:
            return np.zeros_like(E)
        rows, cols = np.indices(w.shape)
        center = np.array([(rows * w).sum() / total, (cols * w).sum() / total])
        diff = center - self.center0
        norm = np.linalg.norm(diff)
        if norm == 0:
            # at the start the objective is flat; push along the row axis
            diff, norm = np.array([1.0, 0.0]), 1.0
        # d center / d w_ij = (pos_ij - center) / total
        dw = (diff[0] * (rows - center[0]) + diff[1] * (cols - center[1])) / (norm * total)
        return np.broadcast_to(dw, E.shape) * sign


def run_attack(model, x, spec: AttackSpec, label: int | None = None) -> AttackResult:
    x = np.asarray(x, np.float64)
    _, c = predict(model, x)
    if label is not None and c != label:
        raise AttackError(f"model predicts {c} for this input, label is {label}; refusing to attack")
    method = spec.method

    def true_map(z):
        return batch_saliency(model, z[None], c, method)[0]

    E0 = true_map(x)
    obj = _Objective(spec, E0)
    lo, hi = ball_bounds(x, spec.epsilon)
    lo, hi = np.maximum(lo, spec.x_min), np.minimum(hi, spec.x_max)
    lo, hi = np.minimum(lo, x), np.maximum(hi, x)
    current = x.copy()
    trace = [obj.value(E0)]
    best, best_val, best_map = x.copy(), trace[0], E0
    step = spec.step
    if spec.epsilon > 0:
        for _ in range(spec.iterations):
            E_s = batch_saliency(model, current[None], c, method, spec.softplus_beta)[0]
            v = obj.grad(E_s)
            g = saliency_vjp(model, current, c, method, v, spec.fd_step, spec.softplus_beta)
            cand = np.minimum(np.maximum(current + step * np.sign(g), lo), hi)
            if predict(model, cand)[1] != c:
                step *= 0.5
                trace.append(trace[-1])
                continue
            current = cand
            E = true_map(current)
            val = obj.value(E)
            trace.append(val)
            if val > best_val:
                best, best_val, best_map = current.copy(), val, E
    preserved = predict(model, best)[1] == c
    return AttackResult(
        x_hat=best,
        trace=trace,
        objective=best_val,
        label_preserved=preserved,
        linf=float(np.abs(best - x).max()),
        delta=np.abs(best_map - E0),
        map_x=E0,
        map_x_hat=best_map,
        kind=spec.kind,
    )
