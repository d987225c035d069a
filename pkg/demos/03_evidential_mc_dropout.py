# %% [markdown]
# # Evidential regression with Monte Carlo dropout
#
# Train the reference message-passing model on one OOD task and look at the
# deterministic and stochastic uncertainty estimates.

# %%
import numpy as np

from oodmat import (ModelConfig, TrainConfig, compute_descriptors, d_eviu, deterministic_infer, generate_synthetic,
                    loco_split, mcd_infer, score, train)
from oodmat.harness import soap_config_for

# %%
ds = generate_synthetic(200, seed=1)
X = compute_descriptors(ds, soap_config_for(ds, {"n_max": 3, "l_max": 2}))
task = loco_split(X, 3, seed=0).tasks[0]
mcfg = ModelConfig(embed_dim=32, n_layers=2, seed=0)
w, history = train(ds, task, mcfg, TrainConfig(epochs=40, seed=0))
print("validation D-MAE: epoch 0 %.3f -> best %.3f" % (history[0]["val_d_mae"],
                                                      min(h["val_d_mae"] for h in history)))

# %%
idx = list(task.test_idx)
det = deterministic_infer(ds, idx, w, mcfg)
passes = mcd_infer(ds, idx, w, mcfg, T=50, seed=0)
rep = score(ds.targets[idx], det, passes, name=task.name)
print({k: round(v, 4) for k, v in rep.row().items() if isinstance(v, float)})

# %%
# which test samples does the model flag as most uncertain?
_, u = d_eviu(passes)
err = np.abs(passes.gamma.mean(axis=0) - ds.targets[idx])
top = np.argsort(-u)[:5]
for i in top:
    print(f"sample {idx[i]:3d}  D-EviU {u[i]:8.3f}  |error| {err[i]:.3f}")
