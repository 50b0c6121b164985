"""Desk-scale benchmark: contaminated texture training, defect segmentation,
metric sweeps over methods, contamination levels and robustness parameters."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import rng_stream
from .corruption import (
    CorruptionSpec, PatchSet, TextureParams, add_local_defects, corrupt, generate_texture_dataset,
)
from .losses import RobustLossSpec
from .metrics import pooled_metrics
from .model import NetConfig, reference_net
from .segmentation import reconstruct_batch, save_heatmap, save_panel
from .trainer import TrainConfig, save_checkpoint, train, write_loss_csv

log = logging.getLogger(__name__)

METHODS = ("ddpm", "rddpm-huber", "rddpm-lts")


@dataclass
class BenchmarkConfig:
    n_train: int = 5000
    n_eval: int = 500
    block_fraction: float = 0.7
    intensity_factor: float = 5.0
    defect_side: tuple = (3, 6)  # eval defect side, in 2x2 blocks
    T: int = 200
    beta_start: float = 0.001
    beta_end: float = 0.02
    epochs: int = 2
    batch_size: int = 4
    learning_rate: float = 1e-3
    hidden: int = 32
    depth: int = 4
    emb_dim: int = 32
    noising_fraction: float = 0.25
    repeats: int = 1
    per_image_mean: bool = False
    eval_batch: int = 16

    def __post_init__(self):
        self.defect_side = tuple(self.defect_side)

    def to_dict(self):
        d = asdict(self)
        d["defect_side"] = list(self.defect_side)
        return d


PROFILES = {
    "ci": dict(n_train=2000, n_eval=100, epochs=1),
    "desk": {},
    "full": dict(n_train=50_000, epochs=10, learning_rate=1e-4, T=1000),
}


def profile_config(name: str = "desk", **overrides) -> BenchmarkConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return BenchmarkConfig(**{**PROFILES[name], **overrides})


@dataclass(frozen=True)
class Cell:
    method: str
    contamination: float
    seed: int
    param: float | None = None  # delta for huber (0 means L1), lambda for lts

    def loss_spec(self) -> RobustLossSpec:
        return method_loss(self.method, self.param)

    @property
    def name(self) -> str:
        p = "" if self.param is None else f"_p{self.param:g}"
        return f"{self.method}_c{self.contamination:g}{p}_s{self.seed}"


def method_loss(method: str, param=None) -> RobustLossSpec:
    if method == "ddpm":
        return RobustLossSpec("l2")
    if method == "rddpm-huber":
        delta = 0.2 if param is None else float(param)
        return RobustLossSpec("l1") if delta == 0 else RobustLossSpec("huber", delta=delta)
    if method == "rddpm-lts":
        return RobustLossSpec("lts", lam=0.8 if param is None else float(param))
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def build_data(cfg: BenchmarkConfig, contamination: float, seed: int,
               texture: TextureParams | None = None) -> tuple[PatchSet, PatchSet]:
    """Contaminated training patches and defect-bearing eval patches.

    The clean texture draw and the eval set depend only on ``seed`` so that
    cells differing in contamination share the same underlying patches.
    """
    texture = texture or TextureParams()
    clean = generate_texture_dataset(cfg.n_train, texture, rng_stream(seed, "data"))
    spec = CorruptionSpec(contamination, cfg.block_fraction, cfg.intensity_factor, seed)
    train_set = corrupt(clean, spec, rng_stream(seed, "corrupt"))
    eval_clean = generate_texture_dataset(cfg.n_eval, texture, rng_stream(seed, "eval-data"))
    eval_set = add_local_defects(eval_clean, rng_stream(seed, "eval-defects"),
                                 factor=cfg.intensity_factor, side_range=cfg.defect_side)
    return train_set, eval_set


def evaluate_model(model, eval_set: PatchSet, schedule, cfg: BenchmarkConfig, seed: int):
    """Segment every eval patch and pool pixel metrics; returns ``(report, recon, heat)``."""
    if len(eval_set) == 0:
        raise ValueError("empty eval split")
    recon, heat = reconstruct_batch(eval_set.images, model, schedule, cfg.noising_fraction,
                                    seed=seed, repeats=cfg.repeats, batch_size=cfg.eval_batch)
    report = pooled_metrics(heat, eval_set.masks, recon, eval_set.images,
                            per_image_mean=cfg.per_image_mean)
    return report, recon, heat


def cell_key(cfg: BenchmarkConfig, cell: Cell) -> str:
    blob = json.dumps({"cfg": cfg.to_dict(), "cell": asdict(cell)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_cell(cfg: BenchmarkConfig, cell: Cell, out_dir=None, cache_dir=None,
             n_panels: int = 0) -> dict:
    """Train one model and evaluate it; returns a flat result row.

    With ``cache_dir`` the row is stored under a hash of ``(cfg, cell)`` and
    reused on later calls. With ``out_dir`` the checkpoint, loss CSV and
    ``n_panels`` example panels are written there.
    """
    if cache_dir is not None:
        path = Path(cache_dir) / f"{cell.name}_{cell_key(cfg, cell)}.json"
        if path.exists():
            return json.loads(path.read_text())
    t0 = time.perf_counter()
    train_set, eval_set = build_data(cfg, cell.contamination, cell.seed)
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                       loss=cell.loss_spec(), T=cfg.T, beta_start=cfg.beta_start,
                       beta_end=cfg.beta_end, seed=cell.seed)
    model = reference_net(NetConfig(hidden=cfg.hidden, depth=cfg.depth, emb_dim=cfg.emb_dim,
                                    T=cfg.T), seed=cell.seed)
    result = train(train_set, tcfg, model)
    t1 = time.perf_counter()
    report, recon, heat = evaluate_model(model, eval_set, tcfg.schedule(), cfg, cell.seed)
    t2 = time.perf_counter()
    row = {
        "method": cell.method, "contamination": cell.contamination,
        "param": cell.param, "loss": cell.loss_spec().label, "seed": cell.seed,
        "auroc": report.auroc, "auprc": report.auprc, "mse": report.masked_mse,
        "final_loss": float(np.mean([h.loss for h in result.history[-200:]])),
        "train_seconds": t1 - t0, "eval_seconds": t2 - t1,
    }
    if out_dir is not None:
        out = Path(out_dir) / cell.name
        save_checkpoint(out / "model.rdpm", model, tcfg, result.epochs_done, result.history)
        write_loss_csv(out / "loss.csv", result.history)
        for i in range(min(n_panels, len(eval_set))):
            save_panel(out / "heatmaps" / f"panel_{i:03d}.png", eval_set.images[i], recon[i],
                       heat[i], eval_set.masks[i])
            save_heatmap(out / "heatmaps", f"heat_{i:03d}", heat[i])
        (out / "report.json").write_text(json.dumps({**row, "report": report.to_dict()}, indent=1))
    if cache_dir is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(row))
    return row


# --------------------------------------------------------------------------
# plans and sweeps

@dataclass
class ExperimentPlan:
    methods: list = field(default_factory=lambda: ["ddpm", "rddpm-huber"])
    contamination: list = field(default_factory=lambda: [0.2])
    deltas: list = field(default_factory=lambda: [0.2])
    lambdas: list = field(default_factory=lambda: [0.8])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out_dir: str | None = None

    def __post_init__(self):
        for name in ("methods", "contamination", "deltas", "lambdas", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"plan.{name} must be nonempty")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")

    def cells(self) -> list[Cell]:
        out = []
        for m in self.methods:
            params = {"ddpm": [None], "rddpm-huber": self.deltas, "rddpm-lts": self.lambdas}[m]
            for c in self.contamination:
                for p in params:
                    for s in self.seeds:
                        out.append(Cell(m, float(c), int(s), None if p is None else float(p)))
        return out


def _run_cell_safe(args):
    cfg, cell, out_dir, cache_dir = args
    try:
        return run_cell(cfg, cell, out_dir, cache_dir)
    except Exception as exc:  # noqa: BLE001 - a failed cell is recorded, the sweep goes on
        log.exception("cell %s failed", cell.name)
        return {"method": cell.method, "contamination": cell.contamination, "param": cell.param,
                "seed": cell.seed, "error": f"{type(exc).__name__}: {exc}"}


def run_plan(plan: ExperimentPlan, cfg: BenchmarkConfig, jobs: int = 1, cache_dir=None,
             out_dir=None) -> list[dict]:
    """Run every cell; rows come back in plan order whatever the execution order."""
    cells = plan.cells()
    args = [(cfg, c, out_dir, cache_dir) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell_safe, args))
    return [_run_cell_safe(a) for a in args]


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and std over seeds per (method, contamination, param); failed cells are skipped."""
    groups: dict = {}
    for r in rows:
        if "error" in r:
            continue
        groups.setdefault((r["method"], r["contamination"], r["param"]), []).append(r)
    out = []
    for (m, c, p), rs in groups.items():
        row = {"method": m, "contamination": c, "param": p, "n_seeds": len(rs)}
        for k in ("auroc", "auprc", "mse"):
            v = np.array([r[k] for r in rs], dtype=np.float64)
            row[k] = float(v.mean())
            row[f"{k}_std"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        out.append(row)
    return out


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def plot_curves(path, agg: list[dict], x_key: str, series_key: str = "method",
                metrics=("auroc", "auprc", "mse"), xlabel=None) -> None:
    """One SVG with a panel per metric, a line per series value."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2))
    for ax, metric in zip(np.atleast_1d(axes), metrics):
        for s in sorted({r[series_key] for r in agg}, key=str):
            pts = sorted((r[x_key], r[metric], r.get(f"{metric}_std", 0.0))
                         for r in agg if r[series_key] == s and r[x_key] is not None)
            if not pts:
                continue
            x, y, e = map(np.array, zip(*pts))
            ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=str(s))
        ax.set_xlabel(xlabel or x_key)
        ax.set_ylabel(metric.upper())
        ax.grid(alpha=0.3)
    np.atleast_1d(axes)[0].legend(fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)


def delta_plan(deltas=(0.0, 0.1, 0.2, 0.3, 0.4), contamination=0.2, seeds=(0, 1, 2)) -> ExperimentPlan:
    return ExperimentPlan(["rddpm-huber"], [contamination], list(deltas), [0.8], list(seeds))


def contamination_plan(levels=(0.0, 0.1, 0.2, 0.3), methods=("ddpm", "rddpm-huber"),
                       seeds=(0, 1, 2)) -> ExperimentPlan:
    return ExperimentPlan(list(methods), list(levels), [0.2], [0.8], list(seeds))


def with_overrides(cfg: BenchmarkConfig, **kw) -> BenchmarkConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
