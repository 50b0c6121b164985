"""Reconstruction-based anomaly heatmaps for patches and whole images."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import rng_stream, write_png
from .diffusion import reconstruct


@dataclass
class Heatmap:
    scores: np.ndarray  # (H, W), nonnegative
    image_id: int | str
    noising_fraction: float


def heatmap_from(x_in, recon) -> np.ndarray:
    """Channel mean of ``|recon - x_in|``; works on ``(C, H, W)`` or batches."""
    d = np.abs(np.asarray(recon, np.float64) - np.asarray(x_in, np.float64))
    return d.mean(axis=-3).astype(np.float32)


def reconstruct_batch(images, model, schedule, noising_fraction=0.25, seed=0, ids=None,
                      repeats=1, batch_size=256, reconstructor=None):
    """Reconstruct ``images`` (N, C, H, W), averaging ``repeats`` draws.

    Image ``i`` uses the stream ``(seed, "segment", ids[i], repeat)`` so the
    result does not depend on batch order or grouping.
    Returns ``(mean_reconstruction, mean_heatmap)``; the heatmap averages
    the per-repeat absolute differences.
    """
    images = np.asarray(images, dtype=np.float32)
    ids = np.arange(len(images)) if ids is None else np.asarray(ids)
    recon_sum = np.zeros(images.shape, np.float64)
    heat_sum = np.zeros((len(images),) + images.shape[2:], np.float64)
    for k in range(repeats):
        for start in range(0, len(images), batch_size):
            x = images[start:start + batch_size]
            if reconstructor is not None:
                r = reconstructor(x)
            else:
                rngs = [rng_stream(seed, "segment", int(i), k) for i in ids[start:start + batch_size]]
                r = reconstruct(x, noising_fraction, model, schedule, rngs)
            recon_sum[start:start + len(x)] += r
            heat_sum[start:start + len(x)] += heatmap_from(x, r)
    return (recon_sum / repeats).astype(np.float32), (heat_sum / repeats).astype(np.float32)


def segment(x_in, model, schedule, noising_fraction=0.25, seed=0, image_id=0, repeats=1,
            reconstructor=None) -> Heatmap:
    """Heatmap for a single ``(C, H, W)`` image."""
    x_in = np.asarray(x_in, dtype=np.float32)
    _, heat = reconstruct_batch(x_in[None], model, schedule, noising_fraction, seed, [image_id],
                                repeats, reconstructor=reconstructor)
    return Heatmap(heat[0], image_id, noising_fraction)


def segment_image(image, model, schedule, patch=28, stride=None, noising_fraction=0.25, seed=0,
                  image_id=0, repeats=1, reconstructor=None) -> Heatmap:
    """Tile ``image`` into patches, segment each and stitch the scores.

    Pixels covered by several tiles (``stride < patch``) get the mean of
    their contributions; pixels no tile reaches score 0.
    """
    from .corruption import tile_offsets

    image = np.asarray(image, dtype=np.float32)
    _, h, w = image.shape
    offs = tile_offsets(h, w, patch, stride)
    tiles = np.stack([image[:, y:y + patch, x:x + patch] for y, x in offs])
    # tile ids are derived from the image id and the tile position
    ids = [zlib.crc32(f"{image_id}:{y}:{x}".encode()) for y, x in offs]
    _, heats = reconstruct_batch(tiles, model, schedule, noising_fraction, seed, ids, repeats,
                                 reconstructor=reconstructor)
    total = np.zeros((h, w), np.float64)
    count = np.zeros((h, w), np.int64)
    for (y, x), hm in zip(offs, heats):
        total[y:y + patch, x:x + patch] += hm
        count[y:y + patch, x:x + patch] += 1
    scores = np.where(count > 0, total / np.maximum(count, 1), 0.0).astype(np.float32)
    return Heatmap(scores, image_id, noising_fraction)


def save_heatmap(out_dir, name, scores) -> None:
    """Raw float32 scores (``.f32``) plus a min-max normalised PNG for viewing."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores = np.asarray(scores, dtype="<f4")
    scores.tofile(out_dir / f"{name}.f32")
    lo, hi = float(scores.min()), float(scores.max())
    vis = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
    write_png(out_dir / f"{name}.png", vis * 2.0 - 1.0)


def save_panel(path, image, recon, scores, mask=None) -> None:
    """Side-by-side panel: input | reconstruction | heatmap [| mask]."""
    def gray(a):
        a = np.asarray(a, np.float64)
        return a.mean(axis=0) if a.ndim == 3 else a

    s = np.asarray(scores, np.float64)
    lo, hi = s.min(), s.max()
    heat = (s - lo) / (hi - lo) * 2 - 1 if hi > lo else np.full_like(s, -1.0)
    cols = [gray(image), gray(recon), heat]
    if mask is not None:
        cols.append(np.asarray(mask, np.float64) * 2 - 1)
    sep = np.ones((cols[0].shape[0], 2))
    row = np.concatenate(sum(([c, sep] for c in cols), [])[:-1], axis=1)
    write_png(path, row)
