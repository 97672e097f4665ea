"""Feed-forward classifiers with block-level taps, plus SGD training.

A block ends at every max-pool layer; a network without pooling ends a
block at every ReLU instead. ``intermediate(model, x, l)`` returns the
output of block ``l`` (1-based).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import __version__, blob
from . import core
from .core import ConfigError, Tape, Var

log = logging.getLogger(__name__)

LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "flatten", "dense", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    size: int = 0
    units: int = 0

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "conv2d":
            d.update(filters=self.filters, size=self.size)
        elif self.kind == "maxpool2d":
            d.update(size=self.size)
        elif self.kind == "dense":
            d.update(units=self.units)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def conv2d(filters: int, size: int = 3) -> LayerSpec:
    return LayerSpec("conv2d", filters=filters, size=size)


def maxpool2d(size: int) -> LayerSpec:
    return LayerSpec("maxpool2d", size=size)


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


RELU, FLATTEN, SOFTMAX = LayerSpec("relu"), LayerSpec("flatten"), LayerSpec("softmax")


def conv_block(filters: int, size: int, pool: int | None = None) -> list[LayerSpec]:
    """conv -> relu -> maxpool. The pool size defaults to the filter size."""
    return [conv2d(filters, size), RELU, maxpool2d(size if pool is None else pool)]


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self) -> list[tuple]:
        """Symbolic per-layer output shapes (without the batch axis)."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            k = layer.kind
            if k not in LAYER_KINDS:
                raise ConfigError(f"layer {i}: unknown kind {k!r}")
            if k == "conv2d":
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: conv2d needs (C, H, W) input, got {shape}")
                if layer.filters < 1 or layer.size < 1:
                    raise ConfigError(f"layer {i}: bad conv2d parameters")
                shape = (layer.filters,) + shape[1:]
            elif k == "maxpool2d":
                if len(shape) != 3 or layer.size < 1 or shape[1] < layer.size or shape[2] < layer.size:
                    raise ConfigError(f"layer {i}: cannot pool {shape} with size {layer.size}")
                shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            elif k == "flatten":
                shape = (int(np.prod(shape)),)
            elif k == "dense":
                if len(shape) != 1:
                    raise ConfigError(f"layer {i}: dense needs flat input, got {shape}")
                shape = (layer.units,)
            elif k == "softmax" and i != len(self.layers) - 1:
                raise ConfigError("softmax must be the final layer")
            out.append(shape)
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ConfigError("final layer must be softmax")
        if out[-1] != (self.n_classes,):
            raise ConfigError(f"network emits {out[-1]}, expected ({self.n_classes},)")
        return out

    @property
    def tap_layers(self) -> list[int]:
        pools = [i for i, l in enumerate(self.layers) if l.kind == "maxpool2d"]
        return pools or [i for i, l in enumerate(self.layers) if l.kind == "relu"]

    def param_shapes(self) -> list[tuple]:
        shapes, shape = [], self.input_shape
        for layer, out in zip(self.layers, self.shapes()):
            if layer.kind == "conv2d":
                shapes += [(layer.filters, shape[0], layer.size, layer.size), (layer.filters,)]
            elif layer.kind == "dense":
                shapes += [(shape[0], layer.units), (layer.units,)]
            shape = out
        return shapes

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "n_classes": self.n_classes,
                "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), tuple(LayerSpec.from_dict(l) for l in d["layers"]),
                   d["n_classes"])


@dataclass
class Weights:
    arrays: list
    seed: int = 0
    config_hash: str = ""

    def copy(self):
        return Weights([a.copy() for a in self.arrays], self.seed, self.config_hash)


def config_hash(obj) -> str:
    return hashlib.sha256(blob.canonical_json(obj).encode()).hexdigest()[:16]


def init_weights(spec: ModelSpec, seed: int) -> Weights:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            arrays.append(np.zeros(shape))
            continue
        if len(shape) == 4:
            rf = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * rf, shape[0] * rf
        else:
            fan_in, fan_out = shape
        a = np.sqrt(6.0 / (fan_in + fan_out))
        arrays.append(rng.uniform(-a, a, size=shape))
    return Weights(arrays, seed=seed)


class Network:
    """A ModelSpec bound to its Weights."""

    def __init__(self, spec: ModelSpec, weights: Weights):
        expected = spec.param_shapes()
        got = [a.shape for a in weights.arrays]
        if [tuple(s) for s in expected] != [tuple(s) for s in got]:
            raise ConfigError(f"weight shapes {got} do not match spec {expected}")
        for a in weights.arrays:
            if not np.all(np.isfinite(a)):
                raise core.NumericError("non-finite weights")
        self.spec = spec
        self.weights = weights

    @property
    def input_shape(self):
        return self.spec.input_shape

    @property
    def n_classes(self):
        return self.spec.n_classes

    @property
    def n_blocks(self):
        return len(self.spec.tap_layers)

    def trace(self, tape: Tape, x: Var, upto_block=None, softplus_beta=None, params=None) -> dict:
        """Run the network on a batch Var, returning block outputs and logits.

        With ``upto_block`` set, evaluation stops after that block and no
        logits are produced. ``softplus_beta`` swaps every ReLU for a
        softplus of that sharpness.
        """
        if params is None:
            params = [tape.leaf(a) for a in self.weights.arrays]
        taps = self.spec.tap_layers
        stop = taps[upto_block - 1] if upto_block else None
        h, p, blocks = x, 0, []
        logits = None
        for i, layer in enumerate(self.spec.layers):
            k = layer.kind
            if k == "conv2d":
                h = core.conv2d(h, params[p], params[p + 1])
                p += 2
            elif k == "dense":
                h = core.dense(h, params[p], params[p + 1])
                p += 2
            elif k == "relu":
                h = core.relu(h) if softplus_beta is None else core.softplus(h, softplus_beta)
            elif k == "maxpool2d":
                h = core.maxpool2d(h, layer.size)
            elif k == "flatten":
                h = core.reshape(h, (h.value.shape[0], -1))
            elif k == "softmax":
                logits = h
            if i in taps:
                blocks.append(h)
            if i == stop:
                break
        return {"blocks": blocks, "logits": logits}

    def forward(self, X: np.ndarray, softplus_beta=None) -> dict:
        tape = Tape()
        acts = self.trace(tape, tape.leaf(X), softplus_beta=softplus_beta)
        return {"blocks": [b.value for b in acts["blocks"]], "logits": acts["logits"].value}

    def logits(self, X: np.ndarray, softplus_beta=None) -> np.ndarray:
        return self.forward(np.asarray(X, np.float64), softplus_beta)["logits"]

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        return core.softmax_array(self.logits(X))

    def block(self, X: np.ndarray, layer: int) -> np.ndarray:
        if not 1 <= layer <= self.n_blocks:
            raise ConfigError(f"layer {layer} outside [1, {self.n_blocks}]")
        tape = Tape()
        acts = self.trace(tape, tape.leaf(np.asarray(X, np.float64)), upto_block=layer)
        return acts["blocks"][layer - 1].value


class QuadraticModel:
    """Logits ``0.5 x A_c x + b_c x`` on the flattened input, one per class.

    Has an affine input gradient, which makes saliency ranges and Hessians
    available in closed form.
    """

    def __init__(self, A: np.ndarray, b: np.ndarray, input_shape=None):
        A = np.asarray(A, np.float64)
        b = np.asarray(b, np.float64)
        if A.ndim == 2:
            A, b = A[None], b[None]
        self.A, self.b = A, b
        d = A.shape[-1]
        self.input_shape = tuple(input_shape) if input_shape is not None else (d,)
        self.n_classes = A.shape[0]
        self.n_blocks = 0

    def hessian(self, c: int) -> np.ndarray:
        return 0.5 * (self.A[c] + self.A[c].T)

    def trace(self, tape: Tape, x: Var, upto_block=None, softplus_beta=None, params=None) -> dict:
        n = x.value.shape[0]
        flat = core.reshape(x, (n, -1))
        xv = flat.value
        A, b = self.A, self.b
        out = 0.5 * np.einsum("ni,cij,nj->nc", xv, A, xv) + xv @ b.T
        As = 0.5 * (A + A.transpose(0, 2, 1))
        logits = tape.record(out, (flat,), lambda g: (np.einsum("nc,cij,nj->ni", g, As, xv) + g @ b,))
        return {"blocks": [], "logits": logits}

    def logits(self, X, softplus_beta=None):
        tape = Tape()
        return self.trace(tape, tape.leaf(np.asarray(X, np.float64)))["logits"].value

    def probabilities(self, X):
        return core.softmax_array(self.logits(X))


def predict(model, x: np.ndarray) -> tuple[np.ndarray, int]:
    """Class probabilities and the arg-max class (lowest index on ties)."""
    x = np.asarray(x, np.float64)
    if x.shape != tuple(model.input_shape):
        raise ConfigError(f"input shape {x.shape} does not match model {tuple(model.input_shape)}")
    p = model.probabilities(x[None])[0]
    return p, int(np.argmax(p))


def intermediate(model: Network, x: np.ndarray, layer: int) -> np.ndarray:
    x = np.asarray(x, np.float64)
    if x.shape != tuple(model.input_shape):
        raise ConfigError(f"input shape {x.shape} does not match model {tuple(model.input_shape)}")
    return model.block(x[None], layer)[0]


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 10
    batch: int = 32
    seed: int = 0

    def to_dict(self):
        return {"lr": self.lr, "epochs": self.epochs, "batch": self.batch, "seed": self.seed}


@dataclass
class TrainLog:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


class DivergenceError(core.NumericError):
    pass


def train(spec: ModelSpec, images: np.ndarray, labels: np.ndarray, hyper: TrainConfig,
          history: TrainLog | None = None) -> Weights:
    """Plain minibatch SGD on softmax cross-entropy. Deterministic given the seed."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= spec.n_classes:
        raise ConfigError(f"labels outside [0, {spec.n_classes})")
    X = np.asarray(images, np.float64).reshape((len(images),) + spec.input_shape)
    weights = init_weights(spec, hyper.seed)
    weights.config_hash = config_hash({"spec": spec.to_dict(), "train": hyper.to_dict()})
    net = Network(spec, weights)
    rng = np.random.default_rng(hyper.seed + 1)
    history = history if history is not None else TrainLog()
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(X))
        total_loss, correct = 0.0, 0
        for start in range(0, len(X), hyper.batch):
            idx = order[start:start + hyper.batch]
            tape = Tape()
            params = [tape.leaf(a) for a in weights.arrays]
            acts = net.trace(tape, tape.leaf(X[idx]), params=params)
            logp = core.log_softmax(acts["logits"])
            onehot = np.zeros_like(logp.value)
            onehot[np.arange(len(idx)), labels[idx]] = 1.0
            loss = core.mul(core.total(core.mul(logp, onehot)), -1.0 / len(idx))
            if not np.isfinite(loss.value):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}, lr={hyper.lr}")
            grads = tape.gradient(loss, params)
            for a, g in zip(weights.arrays, grads):
                a -= hyper.lr * g
            if not all(np.all(np.isfinite(a)) for a in weights.arrays):
                raise DivergenceError(f"weights became non-finite at epoch {epoch}, lr={hyper.lr}")
            total_loss += float(loss.value) * len(idx)
            correct += int((acts["logits"].value.argmax(axis=1) == labels[idx]).sum())
        history.loss.append(total_loss / len(X))
        history.accuracy.append(correct / len(X))
        log.info("epoch %d loss %.4f acc %.4f", epoch + 1, history.loss[-1], history.accuracy[-1])
    return weights


def accuracy(model, images, labels) -> float:
    X = np.asarray(images, np.float64).reshape((len(images),) + tuple(model.input_shape))
    pred = model.logits(X).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


def save_weights(weights: Weights, spec: ModelSpec, path) -> None:
    header = {"kind": "weights", "spec": spec.to_dict(), "tool_version": __version__,
              "seed": weights.seed, "config_hash": weights.config_hash}
    blob.write(path, header, weights.arrays)


def load_weights(path) -> tuple[ModelSpec, Weights]:
    header, arrays = blob.read(path)
    if header.get("kind") != "weights":
        raise blob.BlobError("file does not hold network weights")
    spec = ModelSpec.from_dict(header["spec"])
    return spec, Weights(arrays, header["seed"], header["config_hash"])


def load_network(path) -> Network:
    spec, weights = load_weights(path)
    return Network(spec, weights)


def golden_cnn_spec(side: int = 16, n_classes: int = 2) -> ModelSpec:
    """Two conv blocks (3x3 filters, pooling as wide as the filter) and a dense head."""
    layers = conv_block(8, 3) + conv_block(16, 3) + [FLATTEN, dense(n_classes), SOFTMAX]
    return ModelSpec((1, side, side), tuple(layers), n_classes)


def mlp_spec(d: int, hidden: list[int], n_classes: int) -> ModelSpec:
    layers = []
    for h in hidden:
        layers += [dense(h), RELU]
    layers += [dense(n_classes), SOFTMAX]
    return ModelSpec((d,), tuple(layers), n_classes)


def linear_spec(d: int, n_classes: int) -> ModelSpec:
    return ModelSpec((d,), (dense(n_classes), SOFTMAX), n_classes)


def linear_network(W: np.ndarray, b=None) -> Network:
    """Logits ``x @ W + b`` for W of shape (d, C)."""
    W = np.asarray(W, np.float64)
    d, C = W.shape
    b = np.zeros(C) if b is None else np.asarray(b, np.float64)
    return Network(linear_spec(d, C), Weights([W, b]))
