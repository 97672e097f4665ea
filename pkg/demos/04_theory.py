"""The decoy range against the input Hessian.

On a quadratic model the gradient is affine, so the range of two decoy maps
is exactly |H (x+ - x-)|. On a small ReLU CNN the same comparison holds up
to a residual that shrinks as the decoy pair is pulled toward x.

Run from the repository root: python3 demos/04_theory.py
"""

import numpy as np

from dance import pipeline
from dance.model import QuadraticModel
from dance.theory import theorem1_residual

rng = np.random.default_rng(0)
q = QuadraticModel(rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6)))
x = rng.uniform(size=6)
xp, xm = x + 0.1, x - 0.05
r = theorem1_residual(q, x, (xp, xm), 0)
print("Z", np.round(r["Z"], 6))
print("T", np.round(r["T"], 6))
print("Z / T", np.round(np.array(r["Z"]) / np.array(r["T"]), 6))

for inst in pipeline.theorem_instances(5, seed=0):
    res = ", ".join(f"{v:.2e}" for v in inst["residuals"])
    print(f"seed {inst['instance_seed']} patch {inst['patch']}: max residual at t=1, 1/2, 1/4: {res}")
