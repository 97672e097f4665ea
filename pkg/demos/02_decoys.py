"""Decoys for one image and the range-aggregated map they produce.

Run from the repository root: python3 demos/02_decoys.py
"""

import numpy as np

from dance import pipeline
from dance.aggregate import dance_score, mean_aggregate
from dance.decoy import generate_decoy_set, mask_layout_hash
from dance.evaluation import fidelity
from dance.model import predict
from dance.render import render_map
from dance.saliency import SaliencyParams, batch_saliency, topk_binarize

cfg = pipeline.RunConfig()
train, test = pipeline.load_data(cfg)
net = pipeline.build_model(cfg, train)
i = pipeline.select_images(net, test, 1)[0]
x = pipeline.as_input(net, test.images[i])
_, c = predict(net, x)

# 8 masks of up to 5 non-adjacent 3x3 patches cover all 36 patches
dc = cfg.decoy_config()
ds = generate_decoy_set(net, x, dc)
print("decoys", len(ds), "layout", mask_layout_hash(ds.masks))
print("epsilon (relative to the first block)", ds.epsilon)
print("certified", ds.feasibility_rate)

for j in range(4):
    cert = ds.certificates[j]
    moved = np.abs(ds.decoys[j] - x).max()
    print(f"decoy {j}: mask {ds.mask_ids[j]} s={ds.directions[j]:+d} "
          f"max pixel change {moved:.3f} deviation {cert.deviation:.4f} objective {cert.objective:.2f}")

# decoys only differ inside their mask
off = ds.masks[ds.mask_ids[0]].array == 0
print("off-mask pixels untouched:", np.array_equal(ds.decoys[0][off], x[off]))

for name in ("vanilla", "smoothgrad", "intgrad"):
    method = SaliencyParams(name, seed=cfg.seed)
    E = batch_saliency(net, x[None], c, method)[0]
    Z = dance_score(net, x, c, ds, method).Z.scores
    M = mean_aggregate(net, x, c, ds, method).Z.scores
    scores = [fidelity(net, x, topk_binarize(s, cfg.fraction), c)[0] for s in (E, Z, M)]
    print(f"{name:10s} fidelity original {scores[0]:.4f} range {scores[1]:.4f} mean {scores[2]:.4f}")
    render_map(Z[0], f"{name}_dance.pgm")
print("wrote *_dance.pgm")
