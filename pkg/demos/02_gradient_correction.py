"""
Projecting a gradient away from old knowledge
=============================================

The correction keeps the update from pointing against reference
gradients that arrive with the model.  With one row this is a single
closed-form projection; with up to three rows the dual is enumerated.
"""
import numpy as np

from icp2pfl.continual import GradientConstraintSet, corrected_gradient, qp_project

g = np.array([1.0, 0.0])
ref = np.array([-1.0, 1.0])          # the previous site's gradient
G = GradientConstraintSet(ref)

print("projected      ", qp_project(g, G))            # (0.5, 0.5)
for eps in (0.0, 0.5, 1.0):
    g_hat, gap = corrected_gradient(g, G, eps)
    print(f"eps={eps:<4} ->  {g_hat}   l1 gap {gap}")

# three rows in 40 dimensions: every constraint ends up satisfied
rng = np.random.default_rng(0)
rows = rng.standard_normal((3, 40))
z = qp_project(rng.standard_normal(40), GradientConstraintSet(*rows))
print("slacks         ", np.round(rows @ z, 12))
