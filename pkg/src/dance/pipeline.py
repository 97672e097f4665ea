"""Seeded end-to-end experiments on the synthetic shapes task.

Everything here is a function of a ``RunConfig`` and its master seed, so a
re-run gives identical numbers whatever the worker count. The CLI, the
acceptance suite and the narrative demos all go through these helpers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import baseline_decoys, dance_score, mean_aggregate
from .attacks import KINDS, AttackSpec, run_attack
from .core import ConfigError
from .data import Dataset, load_idx, synthetic_shapes
from .decoy import DecoyConfig, Mask, generate_decoy, generate_decoy_set, patch_grid
from .evaluation import fidelity, ground_truth_overlap, sensitivity
from .model import (ModelSpec, Network, TrainConfig, TrainLog, accuracy, config_hash, conv2d, dense,
                    golden_cnn_spec, init_weights, load_network, maxpool2d, predict, train,
                    RELU, FLATTEN, SOFTMAX)
from .saliency import SaliencyParams, batch_saliency, topk_binarize
from .theory import prop1_check, same_linear_region, taylor_consistency

log = logging.getLogger(__name__)

# dataset streams hang off the master seed so one number pins the whole run
TRAIN_DATA_OFFSET = 1
TEST_DATA_OFFSET = 2
THEORY_OFFSET = 1000


@dataclass
class DataConfig:
    source: str = "synthetic"          # synthetic | idx
    n_train: int = 1500
    n_test: int = 300
    side: int = 16
    noise: float = 0.1
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "idx" and not (self.train_images and self.test_images):
            raise ConfigError("idx datasets need train_images and test_images paths")
        if self.source == "synthetic" and self.side < 9:
            raise ConfigError("synthetic shapes need side >= 9")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _default_methods():
    return [SaliencyParams("vanilla"), SaliencyParams("smoothgrad"), SaliencyParams("intgrad")]


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.1))
    weights: str | None = None
    methods: list = field(default_factory=_default_methods)
    decoy: DecoyConfig = field(default_factory=DecoyConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    attacks: tuple = KINDS
    fraction: float = 0.2
    images: int = 50
    explain_images: int = 4
    attack_images: int = 30
    prop1_images: int = 10
    C2: float = 1.0
    decoy_counts: tuple = ((4, 9), (8, 5), (16, 3))
    theory_instances: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ConfigError("fraction must lie in (0, 1]")
        for k in self.attacks:
            if k not in KINDS:
                raise ConfigError(f"unknown attack kind {k!r}")
        if min(self.images, self.explain_images, self.attack_images, self.prop1_images, self.theory_instances) < 0:
            raise ConfigError("image counts must be >= 0")
        if self.C2 < 0:
            raise ConfigError("C2 must be >= 0")

    # components with the master seed filled in
    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def decoy_config(self) -> DecoyConfig:
        return self.decoy.with_(seed=self.seed)

    def saliency_params(self) -> list[SaliencyParams]:
        return [replace(p, seed=self.seed) for p in self.methods]

    def attack_spec(self, kind: str) -> AttackSpec:
        return replace(self.attack, kind=kind, seed=self.seed, method=replace(self.attack.method, seed=self.seed))

    def to_dict(self) -> dict:
        dec = self.decoy.to_dict()
        dec.pop("seed")
        dec.pop("kappa")
        att = self.attack.to_dict()
        for k in ("kind", "seed"):
            att.pop(k)
        att["method"].pop("seed")
        methods = []
        for p in self.methods:
            d = p.to_dict()
            d.pop("seed")
            methods.append(d)
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "data": self.data.to_dict(), "train": train, "weights": self.weights, "methods": methods,
            "decoy": dec, "attack": att, "attacks": list(self.attacks), "fraction": self.fraction,
            "images": self.images, "explain_images": self.explain_images,
            "attack_images": self.attack_images, "prop1_images": self.prop1_images,
            "C2": self.C2, "decoy_counts": [list(p) for p in self.decoy_counts],
            "theory_instances": self.theory_instances, "seed": self.seed,
        }

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Strict parse: unknown keys are errors, missing keys take defaults."""
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        _reject_unknown(d, allowed, "config")
        kw = {}
        try:
            if "data" in d:
                _reject_unknown(d["data"], {f.name for f in fields(DataConfig)}, "data")
                kw["data"] = DataConfig(**d["data"])
            if "train" in d:
                _reject_unknown(d["train"], {"lr", "epochs", "batch"}, "train")
                kw["train"] = TrainConfig(**{"lr": 0.1, **d["train"]})
            if "methods" in d:
                kw["methods"] = [_saliency(m) for m in d["methods"]]
            if "decoy" in d:
                keys = set(DecoyConfig.__dataclass_fields__) - {"seed", "kappa"}
                _reject_unknown(d["decoy"], keys, "decoy")
                kw["decoy"] = DecoyConfig(**d["decoy"])
            if "attack" in d:
                keys = {f.name for f in fields(AttackSpec)} - {"seed", "kind"}
                _reject_unknown(d["attack"], keys, "attack")
                a = dict(d["attack"])
                if "method" in a:
                    a["method"] = _saliency(a["method"])
                if a.get("region") is not None:
                    a["region"] = tuple(a["region"])
                kw["attack"] = AttackSpec(**a)
            for k in ("attacks", "decoy_counts"):
                if k in d:
                    kw[k] = tuple(tuple(v) if isinstance(v, list) else v for v in d[k])
            for k in ("weights", "fraction", "images", "explain_images", "attack_images", "prop1_images",
                      "C2", "theory_instances", "seed"):
                if k in d:
                    kw[k] = d[k]
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(**kw)
        if not isinstance(cfg.seed, int) or cfg.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        for n, m in cfg.decoy_counts:
            if n < 1 or m < 1:
                raise ConfigError("decoy_counts entries must be positive (n, m) pairs")
        return cfg


def _reject_unknown(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _saliency(d) -> SaliencyParams:
    if isinstance(d, str):
        return SaliencyParams(d)
    _reject_unknown(d, {"method", "n_samples", "sigma", "steps", "baseline"}, "saliency method")
    d = dict(d)
    if d.get("baseline") not in (None, "zeros"):
        d["baseline"] = np.asarray(d["baseline"], np.float64)
    else:
        d["baseline"] = None
    return SaliencyParams(**d)


def provenance(cfg: RunConfig) -> dict:
    return {"tool_version": __version__, "config_hash": cfg.hash, "seed": cfg.seed}


# ---------------------------------------------------------------- data and model


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    dc = cfg.data
    if dc.source == "synthetic":
        tr = synthetic_shapes(dc.n_train, cfg.seed + TRAIN_DATA_OFFSET, dc.side, dc.noise)
        te = synthetic_shapes(dc.n_test, cfg.seed + TEST_DATA_OFFSET, dc.side, dc.noise)
        return tr, te
    return load_idx(dc.train_images, dc.train_labels), load_idx(dc.test_images, dc.test_labels)


def model_spec(train_set: Dataset, n_classes: int = 2) -> ModelSpec:
    return golden_cnn_spec(train_set.images.shape[-1], n_classes)


def build_model(cfg: RunConfig, train_set: Dataset, history: TrainLog | None = None) -> Network:
    """Load ``cfg.weights`` if it exists, else train the shapes CNN."""
    if cfg.weights and Path(cfg.weights).exists():
        return load_network(cfg.weights)
    n_classes = int(train_set.labels.max()) + 1
    spec = model_spec(train_set, max(n_classes, 2))
    train_set.validate(spec.n_classes)
    weights = train(spec, train_set.images, train_set.labels, cfg.train_config(), history)
    return Network(spec, weights)


def select_images(net, test: Dataset, count: int) -> list[int]:
    """First ``count`` test images the model classifies correctly."""
    pred = net.logits(test.images[:, None]).argmax(axis=1)
    ok = np.flatnonzero(pred == test.labels)
    if len(ok) < count:
        raise ConfigError(f"only {len(ok)} correctly classified test images, {count} requested")
    return [int(i) for i in ok[:count]]


def as_input(net, image) -> np.ndarray:
    return np.asarray(image, np.float64).reshape(net.input_shape)


# ---------------------------------------------------------------- explanations


def explain(net, x, method: SaliencyParams, decoys, fraction: float = 0.2) -> dict:
    """Original map, decoy-enhanced map and their top-K binarizations."""
    _, c = predict(net, x)
    E = batch_saliency(net, x[None], c, method)[0]
    agg = dance_score(net, x, c, decoys, method)
    return {"class": c, "original": E, "dance": agg.Z.scores,
            "original_topk": topk_binarize(E, fraction), "dance_topk": topk_binarize(agg.Z.scores, fraction)}


def fidelity_records(net, x, c, method: SaliencyParams, sets: dict, fraction: float,
                     truth=None, image: int = 0) -> list[dict]:
    """Fidelity of the original map and of every (decoy source, aggregation) variant."""
    E = batch_saliency(net, x[None], c, method)[0]
    variants = {"original": E}
    variants["decoy+range"] = dance_score(net, x, c, sets["optimized"], method).Z.scores
    variants["decoy+mean"] = mean_aggregate(net, x, c, sets["optimized"], method).Z.scores
    for src in ("constant", "noise"):
        if src in sets:
            variants[f"{src}+range"] = dance_score(net, x, c, sets[src], method).Z.scores
    out = []
    for name, smap in variants.items():
        b = topk_binarize(smap, fraction)
        sf, clamped = fidelity(net, x, b, c)
        rec = {"image": image, "method": method.method, "aggregation": name, "fidelity": sf,
               "clamped": clamped}
        if truth is not None:
            rec["overlap"] = ground_truth_overlap(b, np.asarray(truth).reshape(b.shape))
        if name != "original":
            src = "optimized" if name.startswith("decoy") else name.split("+")[0]
            rec["feasibility"] = sets[src].feasibility_rate
        out.append(rec)
    return out


def decoy_sets(net, x, cfg: RunConfig, mean_value: float, workers: int = 1, decoy=None) -> dict:
    decoy = decoy or cfg.decoy_config()
    opt = generate_decoy_set(net, x, decoy, workers=workers)
    return {
        "optimized": opt,
        "constant": baseline_decoys(net, x, "constant", opt.masks, decoy, fill_value=mean_value),
        "noise": baseline_decoys(net, x, "noise", opt.masks, decoy, seed=cfg.seed),
    }


def fidelity_experiment(net, test: Dataset, idx, cfg: RunConfig, mean_value: float,
                        workers: int = 1) -> list[dict]:
    records = []
    for i in idx:
        x = as_input(net, test.images[i])
        _, c = predict(net, x)
        sets = decoy_sets(net, x, cfg, mean_value, workers)
        truth = None if test.masks is None else test.masks[i]
        for method in cfg.saliency_params():
            records += fidelity_records(net, x, c, method, sets, cfg.fraction, truth, i)
    return records


def decoy_count_experiment(net, test: Dataset, idx, cfg: RunConfig, workers: int = 1,
                           method: SaliencyParams | None = None) -> list[dict]:
    """Decoy+range fidelity as the mask count n varies at full patch coverage."""
    method = method or cfg.saliency_params()[0]
    records = []
    for n, m in cfg.decoy_counts:
        dc = cfg.decoy_config().with_(n=n, m=m)
        for i in idx:
            x = as_input(net, test.images[i])
            _, c = predict(net, x)
            ds = generate_decoy_set(net, x, dc, workers=workers)
            Z = dance_score(net, x, c, ds, method).Z.scores
            sf, _ = fidelity(net, x, topk_binarize(Z, cfg.fraction), c)
            records.append({"image": i, "method": method.method, "aggregation": f"n={n}",
                            "n": n, "m": m, "fidelity": sf, "feasibility": ds.feasibility_rate})
    return records


def sensitivity_experiment(net, test: Dataset, idx, cfg: RunConfig, workers: int = 1,
                           keep_results: bool = False) -> list[dict]:
    """Attack each image with every attack kind; compare map sensitivity of the
    attacked method with and without decoy enhancement."""
    dc = cfg.decoy_config()
    records = []
    for i in idx:
        x = as_input(net, test.images[i])
        _, c = predict(net, x)
        ds_x = generate_decoy_set(net, x, dc, workers=workers)
        for kind in cfg.attacks:
            spec = cfg.attack_spec(kind)
            res = run_attack(net, x, spec, label=int(test.labels[i]))
            rec = {"image": i, "method": spec.method.method, "attack": kind,
                   "label_preserved": res.label_preserved, "linf": res.linf,
                   "budget_ok": bool(res.linf <= spec.epsilon), "objective": res.objective}
            if res.linf == 0:
                rec.update(aggregation="original", sensitivity=None)
                records.append(rec)
                continue
            ds_h = generate_decoy_set(net, res.x_hat, dc, workers=workers)
            Zx = dance_score(net, x, c, ds_x, spec.method).Z.scores
            Zh = dance_score(net, res.x_hat, c, ds_h, spec.method).Z.scores
            for agg, a, b in (("original", res.map_x, res.map_x_hat), ("decoy+range", Zx, Zh)):
                r = dict(rec, aggregation=agg,
                         sensitivity=sensitivity(a, b, x, res.x_hat, "l1"),
                         sensitivity_topk=sensitivity(a, b, x, res.x_hat, "topk", cfg.fraction))
                if keep_results:
                    r["_x_hat"] = res.x_hat
                records.append(r)
    return records


def prop1_experiment(net, test: Dataset, idx, cfg: RunConfig, workers: int = 1, kind: str = "topk") -> list[dict]:
    out = []
    for i in idx:
        x = as_input(net, test.images[i])
        r = prop1_check(net, x, cfg.attack_spec(kind), cfg.C2, cfg.decoy_config(), workers=workers)
        out.append({"image": i, "rate": r["rate"], "rate_positive_delta": r["rate_positive_delta"],
                    "caps_respected": r["caps_respected"], "satisfied": r["satisfied"],
                    "delta": r["delta"], "z_gap": r["z_gap"], "feasibility": r["feasibility"],
                    "attack": r["attack"]})
    return out


# ---------------------------------------------------------------- theory instances


def tiny_cnn_spec() -> ModelSpec:
    """8x8 single-channel CNN small enough for dense Hessians (d = 64)."""
    return ModelSpec((1, 8, 8), (conv2d(4, 3), RELU, maxpool2d(2), FLATTEN, dense(2), SOFTMAX), 2)


def single_patch_mask(shape, patch: int, k: int) -> Mask:
    groups, _ = patch_grid(shape, patch)
    arr = np.zeros(int(np.prod(shape)))
    arr[groups[k]] = 1.0
    return Mask(arr.reshape(shape), [k], 0)


def theorem_instances(count: int, seed: int = 0, max_tries: int = 500,
                      decoy: DecoyConfig | None = None) -> list[dict]:
    """Seeded (model, x, decoy pair) triples whose pair and x share one linear region.

    Each candidate uses fresh random weights, a uniform random input and one
    random 3x3 patch; candidates whose pair crosses a ReLU or pooling switch
    are skipped. Returns residuals for shrink factors 1, 1/2, 1/4.
    """
    decoy = decoy or DecoyConfig(epsilon=0.05, kappa=0.1)
    spec = tiny_cnn_spec()
    out = []
    for t in range(max_tries):
        if len(out) == count:
            break
        s = seed + THEORY_OFFSET + t
        net = Network(spec, init_weights(spec, s))
        rng = np.random.default_rng(s)
        x = rng.uniform(0.0, 1.0, spec.input_shape)
        n_patches = len(patch_grid(spec.input_shape, decoy.patch)[0])
        mk = single_patch_mask(spec.input_shape, decoy.patch, int(rng.integers(n_patches)))
        cfg = decoy.with_(seed=s)
        xp, cp = generate_decoy(net, x, mk, 1, cfg)
        xm, cm = generate_decoy(net, x, mk, -1, cfg)
        if not (cp.satisfied and cm.satisfied) or np.array_equal(xp, xm):
            continue
        if not same_linear_region(net, x, xp, xm):
            continue
        _, c = predict(net, x)
        res = taylor_consistency(net, x, (xp, xm), c)
        out.append({"instance_seed": s, "patch": mk.groups[0], "class": c,
                    "residuals": res, "non_increasing": bool(all(a >= b for a, b in zip(res, res[1:])))})
    if len(out) < count:
        raise ConfigError(f"found only {len(out)} smooth-region instances in {max_tries} tries")
    return out


def median(records, key="fidelity", **match) -> float:
    vals = [r[key] for r in records if all(r.get(k) == v for k, v in match.items()) and r.get(key) is not None]
    return float(np.median(vals))


__all__ = [
    "DataConfig", "RunConfig", "provenance", "load_data", "build_model", "select_images", "explain",
    "fidelity_records", "decoy_sets", "fidelity_experiment", "decoy_count_experiment",
    "sensitivity_experiment", "prop1_experiment", "theorem_instances", "tiny_cnn_spec", "median",
    "accuracy",
]
