"""
Graph contrastive loss
======================

Pseudo-labels define a target graph; the embedding graph of two strong views
is trained toward it. With threshold T=1 only self-loops remain and the loss
is plain instance discrimination.
"""

import numpy as np

from comatch import oracles
from comatch.graph import (
    build_embedding_graph,
    build_pseudo_label_graph,
    contrastive_loss,
    decomposition_check,
    mean_graph_degree,
)

rng = np.random.default_rng(1)

q = np.array([[0.98, 0.02], [0.9, 0.1], [0.1, 0.9], [0.5, 0.5]])
Wq = build_pseudo_label_graph(q, T=0.7)
print("pseudo-label graph\n", np.round(Wq, 3))
print("mean degree", mean_graph_degree(Wq))

# %%
# Embeddings of two strong views. Aligning the views of samples 0 and 1
# with each other lowers the loss, since they share a pseudo-label.
z = rng.standard_normal((4, 8))
z /= np.linalg.norm(z, axis=1, keepdims=True)
zp = z + 0.1 * rng.standard_normal(z.shape)
zp /= np.linalg.norm(zp, axis=1, keepdims=True)
Wz = build_embedding_graph(z, zp, t=0.2)
print("loss", contrastive_loss(Wq, Wz))

z2 = z.copy()
z2[1] = z[0] + 0.05 * rng.standard_normal(8)
z2[1] /= np.linalg.norm(z2[1])
print("loss with 0 and 1 aligned", contrastive_loss(Wq, build_embedding_graph(z2, zp, 0.2)))

# %%
# Self term plus peer term recovers each row's cross-entropy.
self_t, peer_t = decomposition_check(Wq, Wz)
print("self", np.round(self_t, 4), "peer", np.round(peer_t, 4))
print("direct", np.round(oracles.graph_cross_entropy_rows(Wq.tolist(), Wz.tolist()), 4))

# %%
# T = 1 leaves only self-loops.
print("T=1 loss", contrastive_loss(build_pseudo_label_graph(q, 1.0), Wz))
print("InfoNCE ", oracles.infonce(z.tolist(), zp.tolist(), 0.2))
