"""
Two moons with two labels per class
===================================

Trains the default configuration on one seed alongside a labeled-only
baseline, then prints the learning curves. Takes about a minute.
"""

import numpy as np

from comatch.experiment import ExperimentConfig, run_train

cfg = ExperimentConfig(seed=0, eval_every=200)
co = run_train(cfg, write=False)
sup = run_train(cfg.replace(lambda_cls=0.0, lambda_ctr=0.0), write=False)

print("step  test_acc(CoMatch)  test_acc(supervised)  confident_ratio  pseudo_label_acc")
for r_co, r_sup in zip(co.rows, sup.rows):
    pla = r_co["pseudo_label_accuracy"]
    cr = r_co["confident_ratio"]
    print(
        f"{r_co['step']:>5} {r_co['test_accuracy']:>17.3f} {r_sup['test_accuracy']:>21.3f}"
        f" {'' if cr is None else f'{cr:16.3f}'} {'' if pla is None else f'{pla:16.3f}'}"
    )

# %%
# Mean number of pseudo-label graph edges per sample over training.
deg = np.array([h["mean_graph_degree"] for h in co.history])
for chunk in np.array_split(deg, 5):
    print(f"mean degree {chunk.mean():8.1f}")
