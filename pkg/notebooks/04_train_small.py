# %% [markdown]
# # Training a small noise predictor
#
# A narrow network trained briefly on contaminated textures with each loss.
# Enough to see the loss fall and the trimmed-sample counts under LTS.

# %%
import numpy as np

from rddpm import CorruptionSpec, RobustLossSpec, TrainConfig, corrupt, generate_texture_dataset, rng_stream
from rddpm.model import NetConfig, reference_net
from rddpm.trainer import train

data = corrupt(generate_texture_dataset(600, rng=rng_stream(0, "data")),
               CorruptionSpec(0.2, seed=0), rng_stream(0, "corrupt"))

# %%
for spec in (RobustLossSpec("l2"), RobustLossSpec("huber", 0.2), RobustLossSpec("lts", lam=0.8)):
    cfg = TrainConfig(epochs=1, batch_size=4, learning_rate=1e-3, loss=spec, T=200, seed=0)
    net = reference_net(NetConfig(hidden=12, depth=3, emb_dim=16), seed=0)
    res = train(data, cfg, net)
    losses = np.array([h.loss for h in res.history])
    kept = np.mean([h.kept_samples for h in res.history])
    print(f"{spec.label:18s} first 25 {losses[:25].mean():.4f}  last 25 {losses[-25:].mean():.4f}  mean kept {kept:.2f}")
