"""Numerical diagnostics relating decoy ranges to the input Hessian, and
the robustness inequality under capped decoys."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__, core
from .aggregate import dance_score
from .attacks import AttackSpec, run_attack
from .core import ConfigError
from .decoy import DecoyConfig, generate_decoy_set
from .model import config_hash
from .saliency import SaliencyParams

MAX_THEORY_DIM = 64


class TheoryError(RuntimeError):
    pass


@dataclass
class TheoryReport:
    theorem: dict = field(default_factory=dict)
    proposition: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"tool_version": __version__, "config_hash": config_hash(self.config),
                "config": self.config, "theorem1": self.theorem, "proposition1": self.proposition}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _loss(c, kind):
    return core.LossSpec(kind, cls=c)


def theorem1_residual(model, x, decoy_pair, c: int, loss_kind: str = "class-logit",
                      h: float = 1e-4, features=None) -> dict:
    """Compare the two-decoy range ``Z_i`` with ``T_i = 0.5 |sum_k D_k H_ki|``.

    ``D = x+ - x-`` and ``H`` is the finite-difference Hessian of the class
    score at ``x``. ``features`` restricts the report (default: features where
    the pair differs from x). No bound is asserted.
    """
    x = np.asarray(x, np.float64)
    if x.size > MAX_THEORY_DIM:
        raise ConfigError(f"theorem check limited to d <= {MAX_THEORY_DIM}, got {x.size}")
    xp, xm = (np.asarray(d, np.float64) for d in decoy_pair)
    loss = _loss(c, loss_kind)
    _, g = core.batch_grad(model, np.stack([xp, xm]), loss)
    Z = np.abs(g[0] - g[1]).ravel()
    H = core.finite_diff_hessian(model, x, loss, h)
    D = (xp - xm).ravel()
    T = 0.5 * np.abs(D @ H)
    if features is None:
        features = np.flatnonzero(((xp != x) | (xm != x)).ravel())
    features = np.asarray(features, dtype=int)
    resid = np.abs(Z - T)
    return {
        "features": features.tolist(),
        "Z": Z[features].tolist(),
        "T": T[features].tolist(),
        "residual": resid[features].tolist(),
        "max_residual": float(resid[features].max()) if features.size else 0.0,
        "loss": loss_kind,
    }


def activation_pattern(model, x) -> tuple:
    """ReLU on/off states and max-pool winners along a forward pass."""
    tape = core.Tape()
    h = tape.leaf(np.asarray(x, np.float64)[None])
    states = []
    params = [tape.leaf(a) for a in model.weights.arrays]
    p = 0
    for layer in model.spec.layers:
        if layer.kind == "conv2d":
            h = core.conv2d(h, params[p], params[p + 1])
            p += 2
        elif layer.kind == "dense":
            h = core.dense(h, params[p], params[p + 1])
            p += 2
        elif layer.kind == "relu":
            states.append((h.value > 0).tobytes())
            h = core.relu(h)
        elif layer.kind == "maxpool2d":
            v = h.value
            N, C, H, W = v.shape
            s = layer.size
            win = v[:, :, :H // s * s, :W // s * s].reshape(N, C, H // s, s, W // s, s)
            states.append(win.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // s, W // s, -1).argmax(-1).tobytes())
            h = core.maxpool2d(h, s)
        elif layer.kind == "flatten":
            h = core.reshape(h, (h.value.shape[0], -1))
    return tuple(states)


def same_linear_region(model, *points) -> bool:
    """True if every point shares one activation pattern; linear regions are
    convex, so their hull then contains no kink."""
    pats = [activation_pattern(model, p) for p in points]
    return all(p == pats[0] for p in pats[1:])


def shrink_pair(x, pair, t: float):
    x = np.asarray(x, np.float64)
    return tuple(x + t * (np.asarray(d, np.float64) - x) for d in pair)


def taylor_consistency(model, x, decoy_pair, c: int, ts=(1.0, 0.5, 0.25),
                       loss_kind: str = "class-probability") -> list[float]:
    """Max residual over the pair's features as the pair shrinks toward x."""
    out = []
    for t in ts:
        r = theorem1_residual(model, x, shrink_pair(x, decoy_pair, t), c, loss_kind)
        out.append(r["max_residual"])
    return out


def prop1_check(model, x, attack_spec: AttackSpec, C2: float, decoy_config: DecoyConfig,
                method: SaliencyParams | None = None, workers: int = 1) -> dict:
    """Attack x, cap decoys of both x and x_hat at ``C2 * delta``, and test
    ``|Z(x_hat)_i - Z(x)_i| <= delta_i`` feature by feature."""
    x = np.asarray(x, np.float64)
    method = method or attack_spec.method
    result = run_attack(model, x, attack_spec)
    delta = result.delta
    if not np.any(delta > 0):
        raise TheoryError("attack left the saliency map unchanged (delta == 0)")
    kappa = C2 * delta
    cfg = decoy_config.with_(kappa=kappa)
    c = int(np.argmax(model.probabilities(x[None])[0]))
    ds_x = generate_decoy_set(model, x, cfg, workers=workers)
    ds_h = generate_decoy_set(model, result.x_hat, cfg, workers=workers)
    caps_ok = bool(all(np.all(np.abs(d - base) <= kappa)
                       for ds, base in ((ds_x, x), (ds_h, result.x_hat)) for d in ds.decoys))
    Zx = dance_score(model, x, c, ds_x, method).Z.scores
    Zh = dance_score(model, result.x_hat, c, ds_h, method).Z.scores
    gap = np.abs(Zh - Zx)
    ok = gap <= delta + 1e-9
    pos = delta > 0
    return {
        "C2": C2,
        "satisfied": ok.ravel().tolist(),
        "rate": float(ok.mean()),
        "rate_positive_delta": float(ok[pos].mean()),
        "caps_respected": caps_ok,
        "delta": delta.ravel().tolist(),
        "z_gap": gap.ravel().tolist(),
        "attack": result.to_dict(),
        "feasibility": [ds_x.feasibility_rate, ds_h.feasibility_rate],
    }
