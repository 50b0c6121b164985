"""Command-line front end: ``rddpm {build-data,train,segment,evaluate,sweep}``.

Config precedence is defaults < ``--config`` JSON file < explicit flags.
Every command writes ``manifest.json`` into ``--out`` with the resolved
config and SHA-256 hashes of its input files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import read_png, rng_stream
from .corruption import (
    EVAL, CorruptionSpec, PatchSet, add_local_defects, corrupt, generate_texture_dataset,
    load_cache, load_mvtec_layout, save_cache,
)
from .experiments import (
    METHODS, PROFILES, BenchmarkConfig, ExperimentPlan, aggregate, plot_curves, run_plan, write_csv,
)
from .losses import RobustLossSpec
from .metrics import pooled_metrics
from .model import NetConfig, reference_net
from .schedule import linear_schedule
from .segmentation import reconstruct_batch, save_heatmap, save_panel, segment_image
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train, write_loss_csv

log = logging.getLogger("rddpm")

DEFAULTS = {
    "build-data": dict(n=5000, n_eval=500, contamination=0.0, block_fraction=0.7,
                       intensity_factor=5.0, seed=0, resolution=100, patch=28,
                       contaminate_with_real=0.0),
    "train": dict(loss="l2", delta=0.2, lam=1.0, epochs=10, batch_size=4, lr=1e-4, T=200,
                  beta_start=0.001, beta_end=0.02, hidden=32, depth=4, emb_dim=32, seed=0,
                  checkpoint_interval=0, max_steps=None, n=None),
    "segment": dict(fraction=0.25, repeats=1, patch=28, stride=None, seed=0),
    "evaluate": dict(fraction=0.25, repeats=1, seed=0, panels=8, per_image_mean=False,
                     method=None, contamination=None),
    "sweep": dict(kind="custom", methods=["ddpm", "rddpm-huber"], contamination=[0.2],
                  deltas=[0.2], lambdas=[0.8], seeds=[0, 1, 2]),
}

PROFILE_FLAGS = {
    "ci": {"train": dict(epochs=1, n=2000), "build-data": dict(n=2000, n_eval=100)},
    "desk": {},
    "full": {"train": dict(epochs=10, T=1000), "build-data": dict(n=50_000)},
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, inputs=(), extra=None) -> dict:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs if p and Path(p).is_file()},
        **(extra or {}),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return manifest


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    cfg.update(PROFILE_FLAGS.get(args.profile or "desk", {}).get(command, {}))
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
        cfg.update(file_cfg.get(command, file_cfg))
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config", "command"):
            cfg[k] = v
    return cfg


# --------------------------------------------------------------------------

def _synthetic(cfg, n_train):
    seed = cfg["seed"]
    clean = generate_texture_dataset(n_train, rng=rng_stream(seed, "data"))
    spec = CorruptionSpec(cfg.get("contamination", 0.0), cfg.get("block_fraction", 0.7),
                          cfg.get("intensity_factor", 5.0), seed)
    train_set = corrupt(clean, spec, rng_stream(seed, "corrupt"))
    return train_set, spec


def cmd_build_data(args) -> int:
    cfg = resolve("build-data", args)
    out = Path(cfg["out"])
    if cfg.get("mvtec"):
        ps = load_mvtec_layout(cfg["mvtec"], cfg.get("category"), cfg["resolution"], cfg["patch"],
                               contaminate_with_real=cfg["contaminate_with_real"], seed=cfg["seed"])
        spec = {"source": "mvtec", "category": cfg.get("category")}
        inputs = []
    else:
        train_set, cspec = _synthetic(cfg, cfg["n"])
        eval_clean = generate_texture_dataset(cfg["n_eval"], rng=rng_stream(cfg["seed"], "eval-data"))
        eval_set = add_local_defects(eval_clean, rng_stream(cfg["seed"], "eval-defects"),
                                     factor=cfg["intensity_factor"])
        ps = PatchSet.concat([train_set, eval_set])
        spec = {"source": "synthetic", "corruption": cspec.__dict__}
        inputs = []
    path = out / "data.rdpd"
    save_cache(path, ps, spec)
    counts = {"patches": len(ps), "train": int((ps.split != EVAL).sum()),
              "eval": int((ps.split == EVAL).sum()),
              "contaminated_train": int((ps.contaminated & (ps.split != EVAL)).sum())}
    write_manifest(out, "build-data", cfg, inputs,
                   {"counts": counts, "spec": spec, "outputs": {"data.rdpd": sha256_file(path)}})
    print(json.dumps(counts))
    return 0


def _load_train_data(cfg):
    if cfg.get("data"):
        ps, _ = load_cache(cfg["data"])
        return ps, [cfg["data"]]
    n = cfg.get("n") or 5000
    train_set, _ = _synthetic({**cfg, "contamination": cfg.get("contamination") or 0.0}, n)
    return train_set, []


def cmd_train(args) -> int:
    cfg = resolve("train", args)
    out = Path(cfg["out"])
    data, inputs = _load_train_data(cfg)
    loss = RobustLossSpec.from_config({"kind": cfg["loss"], "delta": cfg["delta"], "lambda": cfg["lam"]})
    tcfg = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
                       loss=loss, T=cfg["T"], beta_start=cfg["beta_start"], beta_end=cfg["beta_end"],
                       seed=cfg["seed"], checkpoint_interval=cfg["checkpoint_interval"],
                       max_steps=cfg["max_steps"])
    model = reference_net(NetConfig(hidden=cfg["hidden"], depth=cfg["depth"], emb_dim=cfg["emb_dim"],
                                    T=cfg["T"]), seed=cfg["seed"])
    t0 = time.perf_counter()
    result = train(data, tcfg, model, checkpoint_dir=out / "checkpoints")
    elapsed = time.perf_counter() - t0
    ckpt = out / "model.rdpm"
    save_checkpoint(ckpt, model, tcfg, result.epochs_done, result.history)
    write_loss_csv(out / "loss.csv", result.history)
    theta_hash = hashlib.sha256(np.ascontiguousarray(model.theta, "<f4").tobytes()).hexdigest()
    write_manifest(out, "train", cfg, inputs,
                   {"train_config": tcfg.to_dict(), "n_params": model.n_params,
                    "theta_sha256": theta_hash, "seconds": elapsed,
                    "outputs": {"model.rdpm": sha256_file(ckpt)}})
    print(json.dumps({"theta_sha256": theta_hash, "steps": len(result.history),
                      "final_loss": result.history[-1].loss, "seconds": round(elapsed, 2)}))
    return 0


def cmd_segment(args) -> int:
    cfg = resolve("segment", args)
    out = Path(cfg["out"])
    model, meta = load_checkpoint(cfg["checkpoint"])
    sched = linear_schedule(**meta["schedule"])
    written = []
    for i, path in enumerate(cfg["images"]):
        img = read_png(path)
        hm = segment_image(img, model, sched, cfg["patch"], cfg["stride"], cfg["fraction"],
                           cfg["seed"], image_id=Path(path).name, repeats=cfg["repeats"])
        name = Path(path).stem
        save_heatmap(out / "heatmaps", name, hm.scores)
        written.append(name)
    write_manifest(out, "segment", cfg, [cfg["checkpoint"], *cfg["images"]], {"heatmaps": written})
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve("evaluate", args)
    out = Path(cfg["out"])
    model, meta = load_checkpoint(cfg["checkpoint"])
    sched = linear_schedule(**meta["schedule"])
    ps, _ = load_cache(cfg["data"])
    ev = ps.eval_set()
    recon, heat = reconstruct_batch(ev.images, model, sched, cfg["fraction"], seed=cfg["seed"],
                                    repeats=cfg["repeats"], batch_size=16)
    report = pooled_metrics(heat, ev.masks, recon, ev.images, per_image_mean=cfg["per_image_mean"])
    report.config = cfg
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, default=str))
    loss = meta["train"]["loss"]
    method = cfg["method"] or {"l2": "ddpm", "huber": "rddpm-huber", "l1": "rddpm-huber",
                               "lts": "rddpm-lts"}[loss["kind"]]
    param = loss.get("delta", loss.get("lambda", 0.0 if loss["kind"] == "l1" else None))
    write_csv(out / "metrics.csv", [report.csv_row(method, cfg["contamination"], param, meta["train"]["seed"])])
    for i in range(min(cfg["panels"], len(ev))):
        save_panel(out / "heatmaps" / f"panel_{i:03d}.png", ev.images[i], recon[i], heat[i], ev.masks[i])
        save_heatmap(out / "heatmaps", f"heat_{i:03d}", heat[i])
    write_manifest(out, "evaluate", cfg, [cfg["checkpoint"], cfg["data"]])
    print(json.dumps({"auroc": report.auroc, "auprc": report.auprc, "mse": report.masked_mse}))
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve("sweep", args)
    out = Path(cfg["out"])
    if cfg["kind"] == "delta":
        cfg["methods"] = ["rddpm-huber"]
    plan = ExperimentPlan(cfg["methods"], cfg["contamination"], cfg["deltas"], cfg["lambdas"],
                          cfg["seeds"], str(out))
    overrides = {k: cfg[k] for k in BenchmarkConfig.__dataclass_fields__ if cfg.get(k) is not None}
    bcfg = BenchmarkConfig(**{**PROFILES[cfg.get("profile") or "desk"], **overrides})
    rows = run_plan(plan, bcfg, jobs=cfg.get("jobs") or 1, out_dir=out / "cells")
    agg = aggregate(rows)
    write_csv(out / "metrics.csv", rows)
    write_csv(out / "aggregate.csv", agg)
    if cfg["kind"] == "delta":
        plot_curves(out / "plots" / "delta.svg", agg, "param", xlabel="delta (0 = L1)")
    else:
        plot_curves(out / "plots" / "contamination.svg", agg, "contamination", xlabel="contamination ratio")
    failed = [r for r in rows if "error" in r]
    write_manifest(out, "sweep", cfg, [], {"benchmark": bcfg.to_dict(), "cells": len(rows),
                                           "failed": failed})
    print(json.dumps({"cells": len(rows), "failed": len(failed), "aggregate_rows": len(agg)}))
    return 0


# --------------------------------------------------------------------------

def _floats(s):
    return [float(v) for v in s.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rddpm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--profile", choices=sorted(PROFILES))
        sp.add_argument("--jobs", type=int)

    sp = sub.add_parser("build-data", help="generate or load patches and write a cache")
    common(sp)
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--synthetic", action="store_true", default=None)
    src.add_argument("--mvtec", help="root of an MVTec-style directory tree")
    sp.add_argument("--class", dest="category")
    sp.add_argument("--n", type=int)
    sp.add_argument("--n-eval", type=int)
    sp.add_argument("--contamination", type=float)
    sp.add_argument("--block-fraction", type=float)
    sp.add_argument("--intensity-factor", type=float)
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--contaminate-with-real", type=float)
    sp.set_defaults(func=cmd_build_data)

    sp = sub.add_parser("train", help="train a noise predictor")
    common(sp)
    sp.add_argument("--data", help="patch cache from build-data (else synthetic)")
    sp.add_argument("--n", type=int, help="synthetic patch count when --data is absent")
    sp.add_argument("--contamination", type=float)
    sp.add_argument("--loss", choices=["l2", "huber", "l1", "lts"])
    sp.add_argument("--delta", type=float)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--T", type=int)
    sp.add_argument("--beta-start", type=float)
    sp.add_argument("--beta-end", type=float)
    sp.add_argument("--hidden", type=int)
    sp.add_argument("--depth", type=int)
    sp.add_argument("--checkpoint-interval", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("segment", help="anomaly heatmaps for PNG images")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("images", nargs="+")
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--patch", type=int)
    sp.add_argument("--stride", type=int)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("evaluate", help="pixel metrics on the eval split of a cache")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--panels", type=int)
    sp.add_argument("--per-image-mean", action="store_true", default=None)
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--contamination", type=float, help="label recorded in metrics.csv")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="train+evaluate a grid of cells and aggregate")
    common(sp)
    sp.add_argument("--kind", choices=["delta", "contamination", "custom"])
    sp.add_argument("--methods", type=lambda s: s.split(","))
    sp.add_argument("--contamination", type=_floats)
    sp.add_argument("--deltas", type=_floats)
    sp.add_argument("--lambdas", type=_floats)
    sp.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")])
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-eval", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--hidden", type=int)
    sp.add_argument("--noising-fraction", type=float)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--per-image-mean", action="store_true", default=None)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"rddpm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
