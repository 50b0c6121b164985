# %% [markdown]
# # Synthetic contamination
#
# Build a small clean texture set, contaminate 20% of it with the block
# amplification corruption, and look at one example.

# %%
import numpy as np
from pathlib import Path

from rddpm import CorruptionSpec, corrupt, generate_texture_dataset, rng_stream
from rddpm.corruption import add_local_defects
from rddpm.core import write_png

OUT = Path("runs/notebooks/03")
OUT.mkdir(parents=True, exist_ok=True)

clean = generate_texture_dataset(200, rng=rng_stream(0, "data"))
dirty = corrupt(clean, CorruptionSpec(0.2, seed=0), rng_stream(0, "corrupt"))
print("contaminated:", int(dirty.contaminated.sum()), "of", len(dirty))

i = int(np.flatnonzero(dirty.contaminated)[0])
blocks = dirty.masks[i].reshape(14, 2, 14, 2).all(axis=(1, 3)).sum()
print("amplified 2x2 blocks in patch", i, "=", blocks)
write_png(OUT / "contaminated.png",
          np.concatenate([clean.images[i, 0], dirty.images[i, 0], dirty.masks[i] * 2.0 - 1], axis=1))

# %% [markdown]
# The evaluation split uses small square defects instead, so segmentation
# has something local to find.

# %%
ev = add_local_defects(generate_texture_dataset(4, rng=rng_stream(0, "eval-data")),
                       rng_stream(0, "eval-defects"))
print("defect pixels per eval patch:", ev.masks.reshape(4, -1).sum(axis=1))
