"""Gradient-based saliency methods and top-K binarization.

All maps are gradients of the pre-softmax logit of the requested class.
Maps keep their sign; consumers that need magnitudes take ``abs`` themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import ConfigError
from .model import config_hash

METHODS = ("vanilla", "smoothgrad", "intgrad")


@dataclass
class SaliencyParams:
    method: str = "vanilla"
    n_samples: int = 25
    sigma: float = 0.1
    baseline: np.ndarray | None = None
    steps: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown saliency method {self.method!r}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")

    def to_dict(self):
        d = {"method": self.method, "seed": self.seed}
        if self.method == "smoothgrad":
            d.update(n_samples=self.n_samples, sigma=self.sigma)
        elif self.method == "intgrad":
            d.update(steps=self.steps,
                     baseline="zeros" if self.baseline is None else config_hash(np.asarray(self.baseline).tolist()))
        return d


@dataclass
class SaliencyMap:
    scores: np.ndarray
    method: str
    cls: int
    params_hash: str = ""
    extra: dict = field(default_factory=dict)


def _logit_loss(c):
    return core.LossSpec("class-logit", cls=c)


def logit_gradients(model, X: np.ndarray, c: int, softplus_beta=None, chunk: int = 1024) -> np.ndarray:
    """Input gradients of logit ``c`` for every row of the batch ``X``."""
    X = np.asarray(X, np.float64)
    out = np.empty_like(X)
    loss = _logit_loss(c)
    for start in range(0, len(X), chunk):
        _, out[start:start + chunk] = core.batch_grad(model, X[start:start + chunk], loss,
                                                      softplus_beta=softplus_beta)
    return out


def _noise(params: SaliencyParams, shape) -> np.ndarray:
    rng = np.random.default_rng(params.seed)
    return rng.normal(0.0, params.sigma, size=(params.n_samples,) + tuple(shape))


def batch_saliency(model, X: np.ndarray, c: int, params: SaliencyParams, softplus_beta=None) -> np.ndarray:
    """Maps for every row of ``X``.

    SmoothGrad reuses one seeded noise draw for every row, so differences
    between rows reflect the rows rather than the noise.
    """
    X = np.asarray(X, np.float64)
    if X.shape[1:] != tuple(model.input_shape):
        raise ConfigError(f"input shape {X.shape[1:]} does not match model {tuple(model.input_shape)}")
    if not 0 <= c < model.n_classes:
        raise ConfigError(f"class index {c} outside [0, {model.n_classes})")
    if params.method == "vanilla" or (params.method == "smoothgrad" and params.sigma == 0):
        # zero noise makes every SmoothGrad sample the plain gradient
        return logit_gradients(model, X, c, softplus_beta)
    if params.method == "smoothgrad":
        g = _noise(params, X.shape[1:])
        probes = (X[:, None] + g[None]).reshape((-1,) + X.shape[1:])
        grads = logit_gradients(model, probes, c, softplus_beta)
        return grads.reshape((len(X), params.n_samples) + X.shape[1:]).mean(axis=1)
    base = np.zeros(X.shape[1:]) if params.baseline is None else np.asarray(params.baseline, np.float64)
    if base.shape != X.shape[1:]:
        raise ConfigError("baseline shape differs from input shape")
    alphas = (np.arange(params.steps) + 0.5) / params.steps
    diff = X - base
    probes = (base + alphas.reshape((1, -1) + (1,) * (X.ndim - 1)) * diff[:, None])
    grads = logit_gradients(model, probes.reshape((-1,) + X.shape[1:]), c, softplus_beta)
    mean = grads.reshape((len(X), params.steps) + X.shape[1:]).mean(axis=1)
    return diff * mean


def _wrap(model, x, c, params, scores) -> SaliencyMap:
    return SaliencyMap(scores, params.method, c, config_hash(params.to_dict()))


def _check_single(model, x):
    x = np.asarray(x, np.float64)
    if x.shape != tuple(model.input_shape):
        raise ConfigError(f"input shape {x.shape} does not match model {tuple(model.input_shape)}")
    return x


def vanilla_gradient(model, x, c: int) -> SaliencyMap:
    x = _check_single(model, x)
    params = SaliencyParams("vanilla")
    return _wrap(model, x, c, params, batch_saliency(model, x[None], c, params)[0])


def smoothgrad(model, x, c: int, params: SaliencyParams) -> SaliencyMap:
    x = _check_single(model, x)
    if params.method != "smoothgrad":
        params = SaliencyParams("smoothgrad", params.n_samples, params.sigma, seed=params.seed)
    return _wrap(model, x, c, params, batch_saliency(model, x[None], c, params)[0])


def integrated_gradients(model, x, c: int, params: SaliencyParams) -> SaliencyMap:
    x = _check_single(model, x)
    if params.method != "intgrad":
        params = SaliencyParams("intgrad", baseline=params.baseline, steps=params.steps, seed=params.seed)
    return _wrap(model, x, c, params, batch_saliency(model, x[None], c, params)[0])


def saliency(model, x, c: int, params: SaliencyParams) -> SaliencyMap:
    x = _check_single(model, x)
    return _wrap(model, x, c, params, batch_saliency(model, x[None], c, params)[0])


def saliency_vjp(model, x: np.ndarray, c: int, params: SaliencyParams, v: np.ndarray,
                 h: float = 1e-3, softplus_beta=None) -> np.ndarray:
    """``J^T v`` where ``J`` is the Jacobian of the saliency map at ``x``.

    Hessian-vector products come from central differences of the autodiff
    gradient with probe length ``h`` (in input units). Vanilla and SmoothGrad
    Jacobians are symmetric Hessians; integrated gradients adds the diagonal
    term from the ``(x - x0)`` factor.
    """
    x = np.asarray(x, np.float64)
    v = np.asarray(v, np.float64)
    scale = np.abs(v).max()
    if scale == 0:
        return np.zeros_like(x)
    if params.method in ("vanilla", "smoothgrad"):
        step = h / scale
        pair = batch_saliency(model, np.stack([x + step * v, x - step * v]), c, params, softplus_beta)
        return (pair[0] - pair[1]) / (2 * step)
    base = np.zeros_like(x) if params.baseline is None else np.asarray(params.baseline, np.float64)
    diff = x - base
    alphas = (np.arange(params.steps) + 0.5) / params.steps
    path = base + alphas.reshape((-1,) + (1,) * x.ndim) * diff
    u = diff * v
    uscale = np.abs(u).max()
    grads = logit_gradients(model, path, c, softplus_beta)
    out = grads.mean(axis=0) * v
    if uscale > 0:
        step = h / uscale
        probes = np.concatenate([path + step * u, path - step * u])
        g = logit_gradients(model, probes, c, softplus_beta)
        hv = (g[:params.steps] - g[params.steps:]) / (2 * step)
        out = out + (alphas.reshape((-1,) + (1,) * x.ndim) * hv).mean(axis=0)
    return out


def topk_count(fraction: float, d: int) -> int:
    if not 0 < fraction <= 1:
        raise ConfigError(f"top-K fraction {fraction} outside (0, 1]")
    return int(np.floor(fraction * d + 1e-9))


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k largest scores; ties go to the lower index."""
    flat = np.asarray(scores, np.float64).ravel()
    return np.argsort(-flat, kind="stable")[:k]


def topk_binarize(smap, fraction: float = 0.2):
    """Binary map with exactly ``floor(fraction * d)`` ones at the top scores.

    Accepts a SaliencyMap (returns one) or a bare array (returns an array).
    """
    scores = smap.scores if isinstance(smap, SaliencyMap) else np.asarray(smap, np.float64)
    k = topk_count(fraction, scores.size)
    out = np.zeros(scores.size)
    out[topk_indices(scores, k)] = 1.0
    out = out.reshape(scores.shape)
    if isinstance(smap, SaliencyMap):
        return SaliencyMap(out, smap.method, smap.cls, smap.params_hash, {"topk_fraction": fraction})
    return out
