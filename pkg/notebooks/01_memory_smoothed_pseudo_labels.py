"""
Memory-smoothed pseudo-labels
=============================

A weak-view prediction is blended with the predictions stored in a memory
bank, weighted by embedding affinity.
"""

import numpy as np

from comatch.pseudolabel import (
    DistributionAligner,
    MemoryBank,
    affinity,
    confidence_mask,
    smooth_pseudo_label,
    smoothness_objective_grad,
)

rng = np.random.default_rng(0)

# A bank of 6 past samples: three confidently class 0, three class 1.
bank = MemoryBank(capacity=6, n_classes=2, embed_dim=2)
angles = np.array([0.0, 0.1, -0.1, np.pi / 2, np.pi / 2 + 0.1, np.pi / 2 - 0.1])
bank.push(np.repeat([[0.97, 0.03], [0.05, 0.95]], 3, axis=0), np.column_stack([np.cos(angles), np.sin(angles)]))

# %%
# A query embedded next to the class-0 entries, with an unsure prediction.
z = np.array([[np.cos(0.05), np.sin(0.05)]])
p = np.array([[0.6, 0.4]])
a = affinity(z, bank.embeds, t=0.2)
print("affinity", np.round(a, 3))

for alpha in (1.0, 0.9, 0.5):
    q = smooth_pseudo_label(p, a, bank.probs, alpha)
    print(f"alpha={alpha}: q={np.round(q[0], 4)} confident={bool(confidence_mask(q, 0.95)[0])}")

# %%
# The blend is the exact minimizer of the smoothness objective; its
# gradient there vanishes.
q = smooth_pseudo_label(p[0], a[0], bank.probs, 0.9)
print("max |dJ/dq| at q:", np.abs(smoothness_objective_grad(q, p[0], a[0], bank.probs, 0.9)).max())

# %%
# Distribution alignment divides by a running class marginal. A model that
# over-predicts class 0 gets its class-0 confidence pulled down.
al = DistributionAligner(2, rho=0.9)
for _ in range(50):
    al.align(rng.dirichlet([6.0, 2.0], size=64))
print("running mean", np.round(al.running_mean, 3))
print("aligned (0.7, 0.3) ->", np.round(al.align(np.array([[0.7, 0.3]]))[0], 3))
