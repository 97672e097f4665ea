"""Attack a saliency map and compare how far the plain and decoy maps move.

Run from the repository root: python3 demos/03_attacks.py
"""

from dance import pipeline
from dance.aggregate import dance_score
from dance.attacks import mass_center, run_attack
from dance.decoy import generate_decoy_set
from dance.evaluation import sensitivity
from dance.model import predict

cfg = pipeline.RunConfig()
train, test = pipeline.load_data(cfg)
net = pipeline.build_model(cfg, train)
i = pipeline.select_images(net, test, 1)[0]
x = pipeline.as_input(net, test.images[i])
_, c = predict(net, x)
dc = cfg.decoy_config()
Zx = dance_score(net, x, c, generate_decoy_set(net, x, dc), cfg.attack.method).Z.scores

for kind in ("topk", "target", "mass-center"):
    spec = cfg.attack_spec(kind)
    r = run_attack(net, x, spec, label=int(test.labels[i]))
    print(f"{kind}: objective {r.trace[0]:.3f} -> {r.objective:.3f}, "
          f"linf {r.linf:.3f} (budget {spec.epsilon}), label kept {r.label_preserved}")
    if kind == "mass-center":
        print("   center", mass_center(r.map_x).round(2), "->", mass_center(r.map_x_hat).round(2))
    Zh = dance_score(net, r.x_hat, c, generate_decoy_set(net, r.x_hat, dc), spec.method).Z.scores
    print(f"   sensitivity original {sensitivity(r.map_x, r.map_x_hat, x, r.x_hat):.4f} "
          f"decoy {sensitivity(Zx, Zh, x, r.x_hat):.4f}")
