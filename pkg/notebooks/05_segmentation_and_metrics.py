# %% [markdown]
# # From reconstruction to pixel metrics
#
# Train a short model on clean textures, reconstruct defective patches
# from t = T/4, and score the heatmaps against the ground-truth masks.

# %%
from pathlib import Path

from rddpm import TrainConfig, generate_texture_dataset, rng_stream
from rddpm.corruption import add_local_defects
from rddpm.metrics import pooled_metrics
from rddpm.model import NetConfig, reference_net
from rddpm.segmentation import reconstruct_batch, save_panel
from rddpm.trainer import train

OUT = Path("runs/notebooks/05")

train_set = generate_texture_dataset(800, rng=rng_stream(1, "data"))
cfg = TrainConfig(epochs=1, batch_size=4, learning_rate=1e-3, T=200, seed=1)
net = reference_net(NetConfig(hidden=12, depth=3, emb_dim=16), seed=1)
train(train_set, cfg, net)

# %%
ev = add_local_defects(generate_texture_dataset(40, rng=rng_stream(1, "eval-data")),
                       rng_stream(1, "eval-defects"))
recon, heat = reconstruct_batch(ev.images, net, cfg.schedule(), 0.25, seed=1, batch_size=20)
rep = pooled_metrics(heat, ev.masks, recon, ev.images)
print(f"AUROC {rep.auroc:.3f}  AUPRC {rep.auprc:.3f}  masked MSE {rep.masked_mse:.4f}")
for i in range(3):
    save_panel(OUT / f"panel_{i}.png", ev.images[i], recon[i], heat[i], ev.masks[i])
