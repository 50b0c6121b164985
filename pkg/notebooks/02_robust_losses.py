# %% [markdown]
# # Robust losses on a toy batch
#
# Three of four samples have small residuals and one is an outlier.
# Compare how much gradient each loss sends to the outlier.

# %%
import numpy as np

from rddpm.losses import BatchResiduals, RobustLossSpec, loss_and_grad

rng = np.random.default_rng(0)
r = rng.normal(0, 0.1, (4, 1, 4, 4))
r[3] += 2.0  # the outlier sample
flat = r.reshape(4, -1)
res = BatchResiduals(r, (flat ** 2).mean(axis=1))

# %%
for spec in (RobustLossSpec("l2"), RobustLossSpec("huber", delta=0.2),
             RobustLossSpec("l1"), RobustLossSpec("lts", lam=0.75)):
    loss, grad, kept = loss_and_grad(res, spec)
    g = np.abs(grad).reshape(4, -1).sum(axis=1)
    share = g[3] / g.sum()
    print(f"{spec.label:18s} loss={loss:8.4f}  outlier share of |grad| = {share:5.1%}  kept={len(kept)}")

# %% [markdown]
# Huber caps the per-pixel pull of the outlier at delta, so its share falls
# compared with L2. LTS drops the sample entirely. Since Huber acts per
# pixel, a sample whose pixels are each only mildly off still gets its
# full weight.
