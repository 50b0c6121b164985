# %% [markdown]
# # A miniature delta sweep
#
# The same harness the CLI uses, shrunk so it finishes in about a minute.
# Real runs use ``rddpm sweep --kind delta`` at desk scale.

# %%
from pathlib import Path

from rddpm.experiments import BenchmarkConfig, aggregate, delta_plan, plot_curves, run_plan, write_csv

OUT = Path("runs/notebooks/06")
cfg = BenchmarkConfig(n_train=800, n_eval=40, epochs=1, hidden=12, depth=3, emb_dim=16)
rows = run_plan(delta_plan(deltas=(0.0, 0.2), seeds=(0, 1)), cfg)
agg = aggregate(rows)
write_csv(OUT / "aggregate.csv", agg)
plot_curves(OUT / "delta.svg", agg, "param", xlabel="delta (0 = L1)")
for r in agg:
    print(r["param"], round(r["auroc"], 3), "+/-", round(r["auroc_std"], 3))
