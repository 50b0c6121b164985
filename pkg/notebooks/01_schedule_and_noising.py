# %% [markdown]
# # Noise schedule and forward noising
#
# A linear beta schedule, the cumulative signal fraction it implies, and
# what a texture patch looks like at a few depths of the forward process.

# %%
import numpy as np
from pathlib import Path

from rddpm import linear_schedule, forward_noise, generate_texture_dataset, rng_stream
from rddpm.core import write_png

OUT = Path("runs/notebooks/01")
OUT.mkdir(parents=True, exist_ok=True)

sched = linear_schedule(200)
print("beta_1, beta_T:", sched.betas[0], sched.betas[-1])
print("alpha_bar at t=1, 50, 200:", sched.alpha_bar(1), sched.alpha_bar(50), sched.alpha_bar(200))

# %% [markdown]
# Signal-to-noise ratio drops by roughly three orders of magnitude over
# the chain. A quarter of the way in (t=50) the patch is still recognisable,
# which is why reconstruction starts there by default.

# %%
snr = sched.alpha_bars / (1 - sched.alpha_bars)
for t in (1, 25, 50, 100, 200):
    print(f"t={t:3d}  snr={snr[t - 1]:10.3f}")

# %%
x0 = generate_texture_dataset(1, rng=rng_stream(0, "nb01")).images
row = [x0[0, 0]]
for t in (10, 50, 100, 200):
    row.append(forward_noise(x0, t, sched, rng_stream(0, "nb01-noise", t)).x_t[0, 0])
strip = np.concatenate(row, axis=1)
write_png(OUT / "noising_strip.png", np.clip(strip, -1, 1))
print("wrote", OUT / "noising_strip.png")
