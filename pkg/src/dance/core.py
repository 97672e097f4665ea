"""Dense float64 reverse-mode autodiff on numpy arrays.

A :class:`Tape` records primitive operations as they execute. Each record
keeps the indices of its operands and a closure mapping the output cotangent
to operand cotangents. :meth:`Tape.gradient` replays the records in reverse.

All primitives treat axis 0 as a batch axis where that matters (conv2d,
maxpool2d, dense), so a batch of independent inputs can share one tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid shapes, indices or parameters."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during evaluation."""


class Var:
    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Var(index={self.index}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive operations for one evaluation."""

    def __init__(self):
        self._inputs: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._values: list[np.ndarray] = []

    def __len__(self):
        return len(self._values)

    def leaf(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        return self._push(value, (), None)

    def record(self, value: np.ndarray, inputs: Sequence[Var], vjp: Callable) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise ConfigError("operands belong to a different tape")
        return self._push(value, tuple(v.index for v in inputs), vjp)

    def _push(self, value, inputs, vjp) -> Var:
        self._values.append(value)
        self._inputs.append(inputs)
        self._vjps.append(vjp)
        return Var(self, len(self._values) - 1, value)

    def gradient(self, out: Var, wrt: Sequence[Var], seed=None) -> list[np.ndarray]:
        """Cotangents of ``out`` with respect to each of ``wrt``.

        ``seed`` defaults to ones shaped like ``out`` (i.e. the gradient of
        ``out.sum()``).
        """
        n = out.index + 1
        grads: list[np.ndarray | None] = [None] * n
        grads[out.index] = np.ones_like(out.value) if seed is None else np.asarray(seed, np.float64)
        for i in range(out.index, -1, -1):
            g = grads[i]
            if g is None or not self._inputs[i]:
                continue
            parts = self._vjps[i](g)
            for j, gj in zip(self._inputs[i], parts):
                if gj is None:
                    continue
                if grads[j] is None:
                    grads[j] = gj
                else:
                    grads[j] = grads[j] + gj
        result = []
        for v in wrt:
            g = grads[v.index] if v.index < n else None
            result.append(np.zeros_like(v.value) if g is None else g)
        return result


def _const(tape: Tape, value) -> Var:
    return value if isinstance(value, Var) else tape.leaf(value)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ConfigError("at least one operand must be a Var")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _const(tape, a), _const(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _const(tape, a), _const(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _const(tape, a), _const(tape, b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def relu(x: Var) -> Var:
    # derivative at exactly 0 is 0
    active = x.value > 0
    return x.tape.record(np.where(active, x.value, 0.0), (x,), lambda g: (g * active,))


def softplus(x: Var, beta: float) -> Var:
    """Smooth ReLU surrogate ``log(1 + exp(beta x)) / beta``."""
    z = beta * x.value
    out = np.logaddexp(0.0, z) / beta
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return x.tape.record(out, (x,), lambda g: (g * sig,))


def absolute(x: Var) -> Var:
    sign = np.sign(x.value)
    return x.tape.record(np.abs(x.value), (x,), lambda g: (g * sign,))


def hinge(x: Var) -> Var:
    """``max(x, 0)``; same convention as :func:`relu`."""
    return relu(x)


def total(x: Var, axis=None) -> Var:
    shape = x.value.shape
    if axis is None:
        return x.tape.record(np.asarray(x.value.sum()), (x,),
                             lambda g: (np.broadcast_to(g, shape).copy(),))
    out = x.value.sum(axis=axis)
    return x.tape.record(out, (x,),
                         lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def reshape(x: Var, shape) -> Var:
    old = x.value.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_class(x: Var, c: int) -> Var:
    """Column ``c`` of a (N, C) array."""
    shape = x.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, c] = g
        return (out,)

    return x.tape.record(x.value[:, c].copy(), (x,), vjp)


def logsumexp(x: Var, axis=-1) -> Var:
    m = x.value.max(axis=axis, keepdims=True)
    e = np.exp(x.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    w = e / s
    return x.tape.record(out, (x,), lambda g: (np.expand_dims(g, axis) * w,))


def log_softmax(x: Var) -> Var:
    m = x.value.max(axis=-1, keepdims=True)
    z = x.value - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return x.tape.record(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def softmax(x: Var) -> Var:
    p = softmax_array(x.value)
    return x.tape.record(p, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def ball_bounds(x: np.ndarray, radius) -> tuple[np.ndarray, np.ndarray]:
    """Bounds of the l-infinity ball around x, tightened by an ulp where
    rounding would let ``|z - x|`` exceed ``radius`` in floating point."""
    x = np.asarray(x, np.float64)
    r = np.broadcast_to(np.asarray(radius, np.float64), x.shape)
    lo, hi = x - r, x + r
    for _ in range(4):
        bad = (x - lo > r) | (hi - x > r)
        if not bad.any():
            break
        lo = np.where(x - lo > r, np.nextafter(lo, np.inf), lo)
        hi = np.where(hi - x > r, np.nextafter(hi, -np.inf), hi)
    return lo, hi


def softmax_array(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def quadratic_form(x: Var, Q: np.ndarray, q: np.ndarray) -> Var:
    """Per-row ``0.5 * x Q x + q x`` for x of shape (N, k)."""
    xv = x.value
    Qx = xv @ Q.T
    out = 0.5 * np.einsum("ni,ni->n", xv, Qx) + xv @ q
    Qs = 0.5 * (Q + Q.T)
    return x.tape.record(out, (x,), lambda g: (g[:, None] * (xv @ Qs.T + q),))


# ---------------------------------------------------------------- layers


def dense(x: Var, w: Var, b: Var) -> Var:
    """``x @ w + b`` with x (N, din), w (din, dout), b (dout,)."""
    xv, wv = x.value, w.value
    return x.tape.record(xv @ wv + b.value, (x, w, b),
                         lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def _same_pad(k: int) -> tuple[int, int]:
    return (k - 1) // 2, k // 2


def conv2d(x: Var, w: Var, b: Var) -> Var:
    """Stride-1 'same' convolution (cross-correlation).

    x: (N, C, H, W); w: (F, C, k, k); b: (F,). Output (N, F, H, W).
    """
    xv, wv = x.value, w.value
    N, C, H, W = xv.shape
    F, C2, k, _ = wv.shape
    if C2 != C:
        raise ConfigError(f"conv2d expects {C2} input channels, got {C}")
    lo, hi = _same_pad(k)
    xp = np.pad(xv, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # (N, C, H, W, k, k) -> (N, H, W, C, k, k) -> (N*H*W, C*k*k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * H * W, C * k * k)
    wmat = wv.reshape(F, C * k * k)
    out = (cols @ wmat.T).reshape(N, H, W, F).transpose(0, 3, 1, 2) + b.value[None, :, None, None]

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(N * H * W, F)
        gw = (gm.T @ cols).reshape(wv.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = (gm @ wmat).reshape(N, H, W, C, k, k)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[:, :, di:di + H, dj:dj + W] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return gxp[:, :, lo:lo + H, lo:lo + W], gw, gb

    return x.tape.record(out, (x, w, b), vjp)


def maxpool2d(x: Var, p: int) -> Var:
    """Non-overlapping p x p max pooling; trailing rows/cols that do not fill
    a window are dropped. Ties route the gradient to the first maximum in
    row-major scan order of the window."""
    xv = x.value
    N, C, H, W = xv.shape
    Ho, Wo = H // p, W // p
    if Ho == 0 or Wo == 0:
        raise ConfigError(f"pool size {p} larger than feature map {H}x{W}")
    crop = xv[:, :, :Ho * p, :Wo * p]
    win = crop.reshape(N, C, Ho, p, Wo, p).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, p * p)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((N, C, Ho, Wo, p * p))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(xv)
        gx[:, :, :Ho * p, :Wo * p] = (
            gw.reshape(N, C, Ho, Wo, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho * p, Wo * p))
        return (gx,)

    return x.tape.record(out, (x,), vjp)


# ---------------------------------------------------------------- losses


def soft_linf(v: Var, beta: float, scale: float = 1.0) -> Var:
    """Smooth upper surrogate of the per-row l-infinity norm.

    ``scale * logsumexp(beta * |v| / scale) / beta`` over all non-batch axes.
    With ``scale`` set to the tolerance of interest the overshoot is at most
    ``scale * log(size) / beta``.
    """
    n = v.value.shape[0]
    flat = reshape(v, (n, -1))
    a = absolute(flat)
    return mul(logsumexp(mul(a, beta / scale), axis=-1), scale / beta)


@dataclass
class LossSpec:
    """Scalar loss of network activations.

    kind: ``class-logit`` | ``class-probability`` | ``layer-deviation-linf`` |
    ``custom-quadratic``. The quadratic kind is ``0.5 o Q o + q o`` on the
    logit vector ``o``.
    """

    kind: str
    cls: int | None = None
    layer: int | None = None
    reference: np.ndarray | None = None
    beta: float = 50.0
    scale: float = 1.0
    Q: np.ndarray | None = None
    q: np.ndarray | None = None
    weight: float = 1.0
    terms: list["LossSpec"] = field(default_factory=list)

    KINDS = ("class-logit", "class-probability", "layer-deviation-linf", "custom-quadratic", "sum")

    def validate(self, model) -> None:
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.kind.startswith("class-"):
            if self.cls is None or not 0 <= self.cls < model.n_classes:
                raise ConfigError(f"class index {self.cls} outside [0, {model.n_classes})")
        if self.kind == "layer-deviation-linf":
            if self.layer is None or not 1 <= self.layer <= model.n_blocks:
                raise ConfigError(f"layer {self.layer} outside [1, {model.n_blocks}]")
            if self.reference is None:
                raise ConfigError("layer-deviation loss needs a reference activation")
        if self.kind == "custom-quadratic" and self.Q is None:
            raise ConfigError("custom-quadratic loss needs Q")
        for t in self.terms:
            t.validate(model)


def combine(*pairs: tuple[float, LossSpec]) -> LossSpec:
    """Weighted sum of losses evaluated on a single tape."""
    terms = []
    for w, spec in pairs:
        s = LossSpec(**{**spec.__dict__, "weight": w})
        terms.append(s)
    return LossSpec("sum", terms=terms)


def _needed_layers(spec: LossSpec) -> set[int]:
    if spec.kind == "sum":
        out = set()
        for t in spec.terms:
            out |= _needed_layers(t)
        return out
    return {spec.layer} if spec.kind == "layer-deviation-linf" else set()


def _needs_logits(spec: LossSpec) -> bool:
    if spec.kind == "sum":
        return any(_needs_logits(t) for t in spec.terms)
    return spec.kind != "layer-deviation-linf"


def build_loss(model, tape: Tape, x: Var, spec: LossSpec, softplus_beta=None) -> Var:
    """Per-sample loss vector (N,) for a batch ``x``."""
    spec.validate(model)
    taps = sorted(_needed_layers(spec))
    upto = None if _needs_logits(spec) else max(taps)
    acts = model.trace(tape, x, upto_block=upto, softplus_beta=softplus_beta)
    return _eval_loss(spec, acts, x.value.shape[0])


def _eval_loss(spec: LossSpec, acts: dict, n: int) -> Var:
    if spec.kind == "sum":
        out = None
        for t in spec.terms:
            term = _eval_loss(t, acts, n)
            out = term if out is None else add(out, term)
        return out
    if spec.kind == "class-logit":
        val = take_class(acts["logits"], spec.cls)
    elif spec.kind == "class-probability":
        val = take_class(softmax(acts["logits"]), spec.cls)
    elif spec.kind == "custom-quadratic":
        q = np.zeros(spec.Q.shape[0]) if spec.q is None else spec.q
        val = quadratic_form(acts["logits"], spec.Q, q)
    else:
        m = acts["blocks"][spec.layer - 1]
        ref = np.broadcast_to(spec.reference, m.value.shape)
        val = soft_linf(sub(m, ref), spec.beta, spec.scale)
    return val if spec.weight == 1.0 else mul(val, spec.weight)


def _check_finite(model, x: np.ndarray, softplus_beta=None):
    tape = Tape()
    acts = model.trace(tape, tape.leaf(x), softplus_beta=softplus_beta)
    for i, m in enumerate(acts["blocks"], start=1):
        if not np.all(np.isfinite(m.value)):
            raise NumericError(f"non-finite activation at block {i}")
    if not np.all(np.isfinite(acts["logits"].value)):
        raise NumericError("non-finite activation at logits")


def batch_grad(model, X: np.ndarray, loss: LossSpec, softplus_beta=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and input gradients for a batch ``X`` of shape
    (N, *input_shape)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1:] != tuple(model.input_shape):
        raise ConfigError(f"input shape {X.shape[1:]} does not match model {tuple(model.input_shape)}")
    tape = Tape()
    xv = tape.leaf(X)
    out = build_loss(model, tape, xv, loss, softplus_beta=softplus_beta)
    if not np.all(np.isfinite(out.value)):
        _check_finite(model, X, softplus_beta)
        raise NumericError("non-finite loss")
    (g,) = tape.gradient(out, [xv])
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    return out.value, g


def grad_wrt_input(model, x: np.ndarray, loss: LossSpec, softplus_beta=None) -> np.ndarray:
    """Gradient of a scalar loss with respect to a single input ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(model.input_shape):
        raise ConfigError(f"input shape {x.shape} does not match model {tuple(model.input_shape)}")
    _, g = batch_grad(model, x[None], loss, softplus_beta=softplus_beta)
    return g[0]


def loss_value(model, X: np.ndarray, loss: LossSpec, softplus_beta=None) -> np.ndarray:
    tape = Tape()
    return build_loss(model, tape, tape.leaf(np.asarray(X, np.float64)), loss, softplus_beta).value


def finite_diff_grad(model, x: np.ndarray, loss: LossSpec, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient; all 2d probes go through one batch."""
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    eye = np.eye(d).reshape((d,) + x.shape) * h
    probes = np.concatenate([x + eye, x - eye])
    vals = loss_value(model, probes, loss)
    return ((vals[:d] - vals[d:]) / (2 * h)).reshape(x.shape)


MAX_HESSIAN_DIM = 256


def finite_diff_hessian(model, x: np.ndarray, loss: LossSpec, h: float = 1e-4) -> np.ndarray:
    """Hessian by central differences of the autodiff gradient, symmetrized.

    Refuses inputs with more than ``MAX_HESSIAN_DIM`` features.
    """
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    if d > MAX_HESSIAN_DIM:
        raise ConfigError(f"finite_diff_hessian refuses d={d} > MAX_HESSIAN_DIM={MAX_HESSIAN_DIM}")
    eye = np.eye(d).reshape((d,) + x.shape) * h
    _, g = batch_grad(model, np.concatenate([x + eye, x - eye]), loss)
    g = g.reshape(2 * d, d)
    H = (g[:d] - g[d:]) / (2 * h)
    return 0.5 * (H + H.T)
