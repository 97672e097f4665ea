"""Command-line entry point: ``dance <command> --config FILE [--seed N] [--workers N] [--out DIR]``.

Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
failures during computation. ``DANCE_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import blob, pipeline
from .core import ConfigError
from .data import DataError
from .decoy import generate_decoy_set, save_decoy_set
from .evaluation import EvalReport, assemble_report, bootstrap_ci
from .model import TrainLog, accuracy, load_network, save_weights
from .render import render_map
from .theory import TheoryReport

log = logging.getLogger("dance")

COMMANDS = ("train", "explain", "attack", "evaluate", "theory-check")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dance", description="Decoy-enhanced saliency maps.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--workers", type=int, default=1, help="decoy solver threads")
    p.add_argument("--out", default="dance-out", help="output directory")
    p.add_argument("--weights", help="weights file (overrides the config)")
    return p


class Run:
    """Shared state for one command: config, output paths and provenance."""

    def __init__(self, cfg: pipeline.RunConfig, out: Path, workers: int, invocation: list):
        self.cfg = cfg
        self.out = out
        self.workers = workers
        self.invocation = invocation
        self.prov = pipeline.provenance(cfg)

    def comment(self) -> str:
        p = self.prov
        return f"dance {p['tool_version']} config {p['config_hash']} seed {p['seed']}"

    def tensor(self, path: Path, arr, **meta):
        path.parent.mkdir(parents=True, exist_ok=True)
        blob.write_tensor(path, np.asarray(arr, np.float64), **self.prov, **meta)

    def json(self, path: Path, obj) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def data(self):
        if not hasattr(self, "_data"):
            self._data = pipeline.load_data(self.cfg)
        return self._data

    def model(self):
        """Weights from --weights / config, else ``<out>/weights.dncw``, else train now."""
        if hasattr(self, "_net"):
            return self._net
        cfg = self.cfg
        path = Path(cfg.weights) if cfg.weights else self.out / "weights.dncw"
        if cfg.weights and not path.exists():
            raise ConfigError(f"weights file {path} does not exist")
        if path.exists():
            self._net = load_network(path)
        else:
            log.info("no weights at %s; training", path)
            self._net = self.train()[0]
        return self._net

    def train(self):
        tr, te = self.data()
        history = TrainLog()
        net = pipeline.build_model(replace(self.cfg, weights=None), tr, history)
        self.out.mkdir(parents=True, exist_ok=True)
        save_weights(net.weights, net.spec, self.out / "weights.dncw")
        self._net = net
        return net, history


def cmd_train(run: Run) -> None:
    net, history = run.train()
    tr, te = run.data()
    run.json(run.out / "train_report.json", {
        **run.prov, "config": run.cfg.to_dict(), "invocation": run.invocation,
        "loss": history.loss, "train_accuracy": history.accuracy,
        "test_accuracy": accuracy(net, te.images, te.labels),
    })


def cmd_explain(run: Run) -> None:
    net = run.model()
    tr, te = run.data()
    cfg = run.cfg
    idx = pipeline.select_images(net, te, cfg.explain_images)
    records = []
    for i in idx:
        x = pipeline.as_input(net, te.images[i])
        ds = generate_decoy_set(net, x, cfg.decoy_config(), workers=run.workers)
        d = run.out / "explain" / f"img{i:04d}"
        save_decoy_set(ds, d, "decoys", **run.prov)
        for method in cfg.saliency_params():
            maps = pipeline.explain(net, x, method, ds, cfg.fraction)
            for name in ("original", "dance", "original_topk", "dance_topk"):
                stem = f"{method.method}_{name}"
                run.tensor(d / f"{stem}.dncw", maps[name], image=i, method=method.method, map=name)
                style = "signed" if name == "original" else "grayscale"
                render_map(np.asarray(maps[name]).reshape(net.input_shape[-2:]), d / f"{stem}.pgm",
                           style, comment=run.comment())
            records.append({"image": i, "method": method.method, "class": maps["class"],
                            "decoys": len(ds), "feasibility": ds.feasibility_rate})
    run.json(run.out / "explain_report.json", {**run.prov, "config": cfg.to_dict(),
                                                "invocation": run.invocation, "records": records})


def _report(run: Run, records, keys, context) -> EvalReport:
    rep = assemble_report(records, run.cfg.to_dict(), run.cfg.seed, run.invocation, keys)
    rep.context = context
    return rep


def cmd_attack(run: Run) -> None:
    net = run.model()
    tr, te = run.data()
    cfg = run.cfg
    idx = pipeline.select_images(net, te, cfg.attack_images)
    records = pipeline.sensitivity_experiment(net, te, idx, cfg, run.workers, keep_results=True)
    for r in records:
        x_hat = r.pop("_x_hat", None)
        if x_hat is not None and r["aggregation"] == "original":
            run.tensor(run.out / "attack" / f"img{r['image']:04d}_{r['attack']}.dncw", x_hat,
                       image=r["image"], attack=r["attack"])
    context = {"images": idx, "model_accuracy": accuracy(net, te.images, te.labels),
               "sensitivity_normalization": "l1 (sensitivity_topk holds the top-K binarized variant)"}
    _report(run, records, ("sensitivity", "sensitivity_topk", "linf"), context).write(
        run.out / "attack_report.json")


def cmd_evaluate(run: Run) -> None:
    net = run.model()
    tr, te = run.data()
    cfg = run.cfg
    idx = pipeline.select_images(net, te, cfg.images)
    records = pipeline.fidelity_experiment(net, te, idx, cfg, tr.mean_value, run.workers)
    counts = pipeline.decoy_count_experiment(net, te, idx, cfg, run.workers)
    ci = {}
    for r in records:
        key = f"{r['method']}/{r['aggregation']}"
        ci.setdefault(key, []).append(r["fidelity"])
    context = {
        "images": idx,
        "model_accuracy": accuracy(net, te.images, te.labels),
        "fidelity_ci95": {k: bootstrap_ci(v, cfg.seed) for k, v in sorted(ci.items())},
        "decoy_count": {f"n={n}": pipeline.median(counts, aggregation=f"n={n}") for n, _ in cfg.decoy_counts},
        "decoy_count_records": counts,
    }
    _report(run, records, ("fidelity", "overlap", "feasibility"), context).write(run.out / "eval_report.json")


def cmd_theory_check(run: Run) -> None:
    cfg = run.cfg
    theorem = pipeline.theorem_instances(cfg.theory_instances, cfg.seed)
    prop = []
    if cfg.prop1_images:
        net = run.model()
        tr, te = run.data()
        idx = pipeline.select_images(net, te, cfg.prop1_images)
        prop = pipeline.prop1_experiment(net, te, idx, cfg, run.workers)
    rates = [r["rate"] for r in prop]
    rep = TheoryReport(
        theorem={"instances": theorem,
                 "all_non_increasing": all(t["non_increasing"] for t in theorem)},
        proposition={"C2": cfg.C2, "images": prop,
                     "rate": float(np.mean([s for r in prop for s in r["satisfied"]])) if prop else None,
                     "per_image_rate": rates,
                     "caps_respected": all(r["caps_respected"] for r in prop)},
        config=cfg.to_dict(),
    )
    d = rep.to_dict()
    d.update(seed=cfg.seed, invocation=run.invocation)
    run.json(run.out / "theory_report.json", d)


HANDLERS = {"train": cmd_train, "explain": cmd_explain, "attack": cmd_attack,
            "evaluate": cmd_evaluate, "theory-check": cmd_theory_check}


def load_config(path, seed=None, weights=None) -> pipeline.RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if isinstance(raw, dict):
        if seed is not None:
            raw["seed"] = seed
        if weights is not None:
            raw["weights"] = weights
    return pipeline.RunConfig.from_dict(raw)


def _invocation(args) -> list:
    # output location and worker count do not change results, so they stay out
    inv = ["dance", args.command, "--config", Path(args.config).name]
    if args.seed is not None:
        inv += ["--seed", str(args.seed)]
    if args.weights is not None:
        inv += ["--weights", Path(args.weights).name]
    return inv


def main(argv=None) -> int:
    parser = build_parser()
    level = os.environ.get("DANCE_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        print(f"dance: invalid DANCE_LOG level {level!r}", file=sys.stderr)
        return 2
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parser.parse_args(argv)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config, args.seed, args.weights)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dance: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataError) as exc:
        print(f"dance: invalid configuration: {exc}", file=sys.stderr)
        return 2
    run = Run(cfg, Path(args.out), args.workers, _invocation(args))
    try:
        HANDLERS[args.command](run)
    except (ConfigError, DataError, blob.BlobError, FileNotFoundError) as exc:
        print(f"dance: invalid input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"dance: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
