"""Decoy generation.

A decoy differs from the input only inside a mask of feature groups, stays
inside the value box, and keeps the block-``layer`` representation within
``epsilon`` in l-infinity norm. Each (mask, direction) pair is solved by
projected gradient ascent on

    || ((x' - x) * s)^+ ||_1  -  lam * max(0, softLinf(F_l(x') - F_l(x)) - eps)

where the projection enforces the box, frozen off-mask features and the
optional per-feature cap exactly. Feasibility is certified with the exact
l-infinity norm; the best certified iterate is returned, so ``x' = x`` (which
is always feasible) bounds the objective from below.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blob, core
from .core import ConfigError, Tape
from .model import config_hash

log = logging.getLogger(__name__)


class DecoyError(RuntimeError):
    pass


class MaskError(ConfigError):
    pass


# ---------------------------------------------------------------- masks


@dataclass
class Mask:
    array: np.ndarray           # input-shaped, 0/1
    groups: list                # patch ids covered
    id: int = 0


def patch_grid(input_shape, patch: int):
    """Tile the spatial plane with ``patch x patch`` squares (stride ``patch``).

    Leftover rows/columns become thinner edge patches so every pixel lies in
    exactly one patch. A group holds the flat indices of its pixels across all
    channels. Returns (groups, grid positions).

    Flat inputs are cut into consecutive runs of ``patch`` features.
    """
    if patch < 1:
        raise ConfigError("patch size must be >= 1")
    shape = tuple(input_shape)
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    groups, pos = [], []
    if len(shape) == 1:
        for k, start in enumerate(range(0, shape[0], patch)):
            groups.append(idx[start:start + patch].ravel())
            pos.append((0, k))
        return groups, pos
    if len(shape) == 2:
        idx = idx[None]
    H, W = idx.shape[1:]
    for r, top in enumerate(range(0, H, patch)):
        for c, left in enumerate(range(0, W, patch)):
            groups.append(np.sort(idx[:, top:top + patch, left:left + patch].ravel()))
            pos.append((r, c))
    return groups, pos


def _adjacent(a, b) -> bool:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1])) <= 1


def _greedy(order, pos, n, m):
    masks: list[list[int]] = [[] for _ in range(n)]
    for p in order:
        best = None
        for j, mk in enumerate(masks):
            if len(mk) >= m or any(_adjacent(pos[p], pos[q]) for q in mk):
                continue
            if best is None or len(mk) < len(masks[best]):
                best = j
        if best is None:
            return None
        masks[best].append(p)
    return masks


def _coloring(pos, n, m):
    """Deterministic fallback: greedy graph colouring, colour classes cut into
    chunks of at most m, then the largest chunks split until n masks exist."""
    colors: list[int] = []
    for p in range(len(pos)):
        used = {colors[q] for q in range(p) if _adjacent(pos[p], pos[q])}
        colors.append(min(set(range(len(used) + 1)) - used))
    chunks = []
    for col in sorted(set(colors)):
        members = [p for p in range(len(pos)) if colors[p] == col]
        for start in range(0, len(members), m):
            chunks.append(members[start:start + m])
    if len(chunks) > n:
        return None
    while len(chunks) < n and max(len(c) for c in chunks) > 1:
        big = max(range(len(chunks)), key=lambda j: len(chunks[j]))
        c = chunks.pop(big)
        half = len(c) // 2
        chunks[big:big] = [c[:half], c[half:]]
    return chunks


def pack_groups(pos, n: int, m: int, seed: int, attempts: int = 64) -> list[list[int]]:
    """Assign patch ids to n masks of at most m pairwise non-adjacent patches,
    covering every patch at least once."""
    n_patch = len(pos)
    if n < 1 or m < 1:
        raise MaskError("n and m must be >= 1")
    if n * m < n_patch:
        raise MaskError(f"{n_patch} patches cannot be covered by n={n} masks of m={m}; raise n")
    rng = np.random.default_rng(seed)
    masks = None
    for _ in range(attempts):
        masks = _greedy(rng.permutation(n_patch), pos, n, m)
        if masks is not None:
            break
    if masks is None:
        masks = _coloring(pos, n, m)
    if masks is None:
        raise MaskError(f"cannot pack {n_patch} patches into {n} masks of {m} non-adjacent patches; raise n")
    # fewer patches than masks: reuse patches so every mask is non-empty
    for j, mk in enumerate(masks):
        if not mk:
            mk.append(j % n_patch)
    while len(masks) < n:
        masks.append([len(masks) % n_patch])
    return [sorted(mk) for mk in masks]


def build_masks(input_shape, patch: int, n: int, m: int, seed: int) -> list[Mask]:
    groups, pos = patch_grid(input_shape, patch)
    packed = pack_groups(pos, n, m, seed)
    size = int(np.prod(input_shape))
    out = []
    for j, ids in enumerate(packed):
        arr = np.zeros(size)
        for p in ids:
            arr[groups[p]] = 1.0
        out.append(Mask(arr.reshape(input_shape), [int(p) for p in ids], j))
    return out


def masks_from_groups(input_shape, groups: list, n: int, m: int, seed: int) -> list[Mask]:
    """Masks over caller-defined feature groups (e.g. one token's embedding).

    Groups are adjacent when their positions in the list are consecutive.
    """
    size = int(np.prod(input_shape))
    for g in groups:
        g = np.asarray(g)
        if g.size == 0 or g.min() < 0 or g.max() >= size or len(set(g.tolist())) != g.size:
            raise ConfigError("feature group indices must be distinct and within [0, d)")
    pos = [(0, k) for k in range(len(groups))]
    packed = pack_groups(pos, n, m, seed)
    out = []
    for j, ids in enumerate(packed):
        arr = np.zeros(size)
        for p in ids:
            arr[np.asarray(groups[p])] = 1.0
        out.append(Mask(arr.reshape(input_shape), [int(p) for p in ids], j))
    return out


def mask_layout_hash(masks: list[Mask]) -> str:
    return config_hash([mk.groups for mk in masks])


# ---------------------------------------------------------------- optimizer


@dataclass
class DecoyConfig:
    layer: int = 1
    epsilon: float = 0.1
    relative_epsilon: bool = True
    x_min: float = 0.0
    x_max: float = 1.0
    n: int = 8
    m: int = 5
    patch: int = 3
    iterations: int = 200
    step: float = 0.05
    lam: float = 10.0
    growth: float = 2.0
    check_every: int = 10
    beta: float = 50.0
    init: float = 0.01
    kappa: np.ndarray | None = None
    seed: int = 0
    tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.n < 1 or self.m < 1:
            raise ConfigError("n and m must be >= 1")
        if not self.x_min < self.x_max:
            raise ConfigError("x_min must be < x_max")
        if self.kappa is not None and np.any(np.asarray(self.kappa) < 0):
            raise ConfigError("kappa must be non-negative")

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "layer", "epsilon", "relative_epsilon", "x_min", "x_max", "n", "m", "patch",
            "iterations", "step", "lam", "growth", "check_every", "beta", "init", "seed", "tol")}
        d["kappa"] = None if self.kappa is None else config_hash(np.asarray(self.kappa).round(15).tolist())
        return d

    def with_(self, **kw) -> "DecoyConfig":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return DecoyConfig(**d)


@dataclass
class Certificate:
    deviation: float
    objective: float
    satisfied: bool
    epsilon: float
    failed: bool = False
    message: str = ""

    def to_dict(self):
        return {"deviation": self.deviation, "objective": self.objective, "satisfied": self.satisfied,
                "epsilon": self.epsilon, "failed": self.failed, "message": self.message}


def resolve_epsilon(model, x, config: DecoyConfig) -> float:
    if not config.relative_epsilon:
        return float(config.epsilon)
    ref = model.block(np.asarray(x, np.float64)[None], config.layer)[0]
    return float(config.epsilon * np.abs(ref).max())


def _objective(xt, x, s):
    return float(np.maximum((xt - x) * s, 0.0).sum())


def _deviation(model, xt, ref, layer):
    return float(np.abs(model.block(xt[None], layer)[0] - ref).max())


def decoy_rng(seed: int, mask_id: int, s: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(mask_id, 0 if s > 0 else 1)))


def generate_decoy(model, x, mask: Mask, s: int, config: DecoyConfig, epsilon: float | None = None,
                   warm_start: np.ndarray | None = None):
    """Solve one (mask, direction) problem; returns ``(decoy, Certificate)``."""
    x = np.asarray(x, np.float64)
    if x.shape != tuple(model.input_shape):
        raise ConfigError(f"input shape {x.shape} does not match model {tuple(model.input_shape)}")
    if not 1 <= config.layer <= model.n_blocks:
        raise ConfigError(f"layer {config.layer} outside [1, {model.n_blocks}]")
    if s not in (1, -1):
        raise ConfigError("direction must be +1 or -1")
    M = np.asarray(mask.array if isinstance(mask, Mask) else mask, np.float64)
    mid = mask.id if isinstance(mask, Mask) else 0
    eps = resolve_epsilon(model, x, config) if epsilon is None else float(epsilon)
    ref = model.block(x[None], config.layer)[0]
    if not M.any():
        return x.copy(), Certificate(0.0, 0.0, True, eps)

    lo = np.full_like(x, config.x_min)
    hi = np.full_like(x, config.x_max)
    if config.kappa is not None:
        klo, khi = core.ball_bounds(x, config.kappa)
        lo = np.maximum(lo, klo)
        hi = np.minimum(hi, khi)
    # frozen features are pinned to x even when x itself lies outside the box
    lo = np.where(M > 0, np.minimum(lo, hi), x)
    hi = np.where(M > 0, np.maximum(hi, lo), x)

    def project(z):
        return np.minimum(np.maximum(z, lo), hi)

    span = config.x_max - config.x_min
    rng = decoy_rng(config.seed, mid, s)
    if warm_start is not None:
        xt = project(np.asarray(warm_start, np.float64))
    else:
        xt = project(x + s * M * rng.uniform(0.0, config.init * span, size=x.shape))
    best, best_obj = x.copy(), 0.0
    if warm_start is not None:
        dev0 = _deviation(model, xt, ref, config.layer)
        if dev0 <= eps:
            best, best_obj = xt.copy(), _objective(xt, x, s)

    scale = eps if eps > 0 else 1.0
    lam = config.lam
    step = config.step * span
    for it in range(config.iterations + 1):
        tape = Tape()
        xv = tape.leaf(xt[None])
        diff = core.sub(model.trace(tape, xv, upto_block=config.layer)["blocks"][config.layer - 1], ref)
        dev = float(np.abs(diff.value).max())
        soft = core.soft_linf(diff, config.beta, scale)
        if not np.isfinite(soft.value).all() or not np.isfinite(dev):
            raise DecoyError(f"non-finite constraint value at iteration {it} for mask {mid}, s={s}")
        if dev <= eps:
            obj = _objective(xt, x, s)
            if obj > best_obj:
                best, best_obj = xt.copy(), obj
        if it == config.iterations:
            break
        g_obj = s * M * ((xt - x) * s >= 0)
        if float(soft.value[0]) > eps:
            (g_pen,) = tape.gradient(soft, [xv])
            direction = g_obj - lam * g_pen[0]
        else:
            direction = g_obj
        moved = project(xt + step * direction)
        if dev <= eps and np.array_equal(moved, xt):
            break
        xt = moved
        if (it + 1) % config.check_every == 0 and dev > eps:
            lam *= config.growth
    deviation = _deviation(model, best, ref, config.layer)
    return best, Certificate(deviation, _objective(best, x, s), deviation <= eps + config.tol, eps)


# ---------------------------------------------------------------- decoy sets


@dataclass
class DecoySet:
    x: np.ndarray
    decoys: np.ndarray                  # (2n, *input_shape), ordered by (mask id, +1 then -1)
    mask_ids: list
    directions: list
    certificates: list
    masks: list
    config: DecoyConfig
    epsilon: float
    source: str = "optimized"
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.decoys)

    @property
    def certified(self) -> np.ndarray:
        return np.array([c.satisfied and not c.failed for c in self.certificates])

    @property
    def feasibility_rate(self) -> float:
        return float(self.certified.mean())

    def usable(self) -> np.ndarray:
        """Decoys that may enter aggregation: certified ones, or all of a baseline set."""
        if self.source != "optimized":
            return self.decoys
        return self.decoys[self.certified]

    def manifest(self) -> dict:
        return {
            "source": self.source,
            "config": self.config.to_dict(),
            "epsilon": self.epsilon,
            "count": len(self.decoys),
            "feasibility_rate": self.feasibility_rate,
            "mask_layout": mask_layout_hash(self.masks),
            "decoys": [
                {"mask_id": int(mid), "direction": int(s), "certificate": c.to_dict(),
                 "sha256": config_hash(np.asarray(d).tobytes().hex())}
                for mid, s, c, d in zip(self.mask_ids, self.directions, self.certificates, self.decoys)
            ],
            **self.extra,
        }


def generate_decoy_set(model, x, config: DecoyConfig, masks: list[Mask] | None = None,
                       workers: int = 1) -> DecoySet:
    """Two decoys (s = +1, -1) per mask; 2n in total, ordered by mask id."""
    x = np.asarray(x, np.float64)
    if masks is None:
        masks = build_masks(x.shape, config.patch, config.n, config.m, config.seed)
    eps = resolve_epsilon(model, x, config)
    units = [(mk, s) for mk in masks for s in (1, -1)]

    def solve(unit):
        mk, s = unit
        try:
            return generate_decoy(model, x, mk, s, config, epsilon=eps)
        except (DecoyError, core.NumericError) as exc:
            log.warning("decoy for mask %d, s=%+d failed: %s", mk.id, s, exc)
            return x.copy(), Certificate(float("nan"), 0.0, False, eps, failed=True, message=str(exc))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve, units))
    else:
        results = [solve(u) for u in units]
    failed = sum(c.failed for _, c in results)
    if failed * 2 > len(results):
        raise DecoyError(f"{failed} of {len(results)} decoys failed")
    return DecoySet(
        x=x,
        decoys=np.stack([d for d, _ in results]),
        mask_ids=[mk.id for mk, _ in units],
        directions=[s for _, s in units],
        certificates=[c for _, c in results],
        masks=masks,
        config=config,
        epsilon=eps,
    )


def save_decoy_set(ds: DecoySet, directory, stem: str = "decoys", **meta) -> Path:
    """Write ``<stem>.json`` plus one DNCW tensor file per decoy; ``meta``
    (e.g. provenance) goes into the manifest and every tensor header."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {**ds.manifest(), **meta}
    for j, entry in enumerate(manifest["decoys"]):
        name = f"{stem}_{j:03d}.dncw"
        blob.write_tensor(directory / name, ds.decoys[j], mask_id=entry["mask_id"],
                          direction=entry["direction"], **meta)
        entry["file"] = name
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path
