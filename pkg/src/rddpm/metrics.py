"""Threshold-free pixel metrics: AUROC, average precision and masked MSE."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given labels."""


def _flat(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with midranks for ties."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks, 1-based
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of recall gain times precision."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive label")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each tie group in descending order
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends].astype(np.float64)
    precision = tp / (ends + 1)
    recall_gain = np.diff(np.r_[0.0, tp]) / n_pos
    return float(np.sum(recall_gain * precision))


def masked_mse(reconstruction, image, mask) -> float:
    """Mean squared difference over pixels with ``mask == 0``.

    ``mask`` is ``(..., H, W)`` and broadcasts over a channel axis.
    """
    r = np.asarray(reconstruction, dtype=np.float64)
    x = np.asarray(image, dtype=np.float64)
    if r.shape != x.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {x.shape}")
    m = np.asarray(mask).astype(bool)
    if r.ndim == m.ndim + 1:
        m = np.expand_dims(m, -3)
    keep = np.broadcast_to(~m, r.shape)
    if not keep.any():
        raise UndefinedMetricError("mask covers every pixel; no normal region left")
    d = (r - x)[keep]
    return float(np.mean(d * d))


@dataclass
class EvalReport:
    auroc: float
    auprc: float
    masked_mse: float
    n_positive: int
    n_negative: int
    per_image: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self, method: str, contamination: float, param, seed: int) -> dict:
        return {"method": method, "contamination": contamination, "param": param,
                "auroc": self.auroc, "auprc": self.auprc, "mse": self.masked_mse, "seed": seed}


def pooled_metrics(heatmaps, masks, reconstructions=None, images=None, per_image_mean=False):
    """Metrics over a stack of heatmaps ``(N, H, W)`` and masks ``(N, H, W)``.

    By default every pixel of every image enters one ranking. With
    ``per_image_mean`` the per-image values are averaged instead, skipping
    images where a metric is undefined.
    """
    heatmaps = np.asarray(heatmaps)
    masks = np.asarray(masks).astype(bool)
    per_image = []
    for i in range(len(heatmaps)):
        row = {"index": i, "positives": int(masks[i].sum())}
        try:
            row["auroc"] = auroc(heatmaps[i], masks[i])
        except UndefinedMetricError:
            row["auroc"] = None
        try:
            row["auprc"] = auprc(heatmaps[i], masks[i])
        except UndefinedMetricError:
            row["auprc"] = None
        if reconstructions is not None and not masks[i].all():
            row["mse"] = masked_mse(reconstructions[i], images[i], masks[i])
        per_image.append(row)
    if per_image_mean:
        a = float(np.mean([r["auroc"] for r in per_image if r["auroc"] is not None]))
        p = float(np.mean([r["auprc"] for r in per_image if r["auprc"] is not None]))
    else:
        a = auroc(heatmaps, masks)
        p = auprc(heatmaps, masks)
    mse = float("nan")
    if reconstructions is not None:
        mse = masked_mse(reconstructions, images, masks)
    n_pos = int(masks.sum())
    return EvalReport(a, p, mse, n_pos, int(masks.size - n_pos), per_image)
