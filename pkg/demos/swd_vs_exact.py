"""How the sliced distance relates to the exact assignment distance.

For a pure translation the mean over unit directions of the squared projected
shift is |shift|^2 / d, so SWD sits near W/d while never exceeding W.

    python demos/swd_vs_exact.py
"""

import numpy as np

from sfsseg.losses import ProjectionSet, exact_wd_oracle, sliced_wasserstein

rng = np.random.default_rng(0)
print(" d    SWD    exact   SWD/exact   d*SWD/exact")
for d in (1, 2, 3, 4, 8):
    P = rng.normal(size=(256, d))
    Q = rng.normal(size=(256, d)) + np.eye(d)[0] * 2.0
    sw = sliced_wasserstein(P, Q, ProjectionSet.draw(d, 100, d)).item()
    ex = exact_wd_oracle(P, Q)
    print(f"{d:2d} {sw:7.3f} {ex:7.3f} {sw / ex:10.3f} {d * sw / ex:12.3f}")

print("\nestimate spread over 20 projection seeds (d=4)")
P, Q = rng.normal(size=(200, 4)), rng.normal(size=(200, 4)) * [1, 3, 1, 0.5]
for V in (5, 25, 50, 100):
    vals = [sliced_wasserstein(P, Q, ProjectionSet.draw(4, V, s)).item() for s in range(20)]
    print(f"V={V:3d} mean {np.mean(vals):.4f} var {np.var(vals):.2e}")
