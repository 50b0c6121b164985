"""Per-sample residuals and the L2, Huber, L1 and LTS training losses.

All losses return ``(loss, grad)`` where ``grad`` is the gradient of the
loss w.r.t. the model *prediction* (same shape as the residual tensor).
Since ``r = eps - pred`` every gradient carries a leading minus sign.
Losses accumulate in float64; gradients are returned in the residual dtype.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("l2", "huber", "l1", "lts")


@dataclass(frozen=True)
class RobustLossSpec:
    """Which loss to train with: ``l2``, ``huber`` (delta), ``l1`` or ``lts`` (lam)."""

    kind: str = "l2"
    delta: float = 0.2
    lam: float = 1.0

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if kind == "huber" and not self.delta > 0:
            raise ValueError("huber needs delta > 0; use kind='l1' for the delta=0 limit")
        if kind == "lts" and not 0 < self.lam <= 1:
            raise ValueError(f"lts needs 0 < lambda <= 1, got {self.lam}")

    @classmethod
    def from_config(cls, cfg: dict) -> "RobustLossSpec":
        """Parse ``{"kind", "delta", "lambda"}`` (as under the ``loss.`` config keys)."""
        kind = cfg.get("kind", "l2")
        delta = float(cfg.get("delta", 0.2))
        if kind == "huber" and delta == 0.0 and cfg.get("l1", False):
            kind = "l1"
        return cls(kind, delta, float(cfg.get("lambda", cfg.get("lam", 1.0))))

    def to_config(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "huber":
            out["delta"] = self.delta
        if self.kind == "lts":
            out["lambda"] = self.lam
        return out

    @property
    def label(self) -> str:
        if self.kind == "huber":
            return f"huber(delta={self.delta:g})"
        if self.kind == "lts":
            return f"lts(lambda={self.lam:g})"
        return self.kind


@dataclass
class BatchResiduals:
    per_element: np.ndarray  # (B, ...) residuals eps - pred
    per_sample_score: np.ndarray  # (B,) float64 mean square per sample

    @property
    def batch_size(self) -> int:
        return self.per_element.shape[0]


def residuals_from_prediction(eps, pred) -> BatchResiduals:
    r = np.asarray(eps) - np.asarray(pred)
    if r.shape[0] < 1:
        raise ValueError("empty batch")
    flat = r.reshape(r.shape[0], -1).astype(np.float64)
    return BatchResiduals(r, np.mean(flat * flat, axis=1))


def residuals(batch, model) -> BatchResiduals:
    """Residuals ``eps - model(x_t, t)`` for a batched :class:`~rddpm.diffusion.NoisySample`."""
    return residuals_from_prediction(batch.eps, model(batch.x_t, batch.t))


def l2_loss(res: BatchResiduals):
    r = res.per_element
    n = r.size
    r64 = r.astype(np.float64)
    loss = float(np.sum(r64 * r64) / n)
    grad = ((-2.0 / n) * r64).astype(r.dtype)
    return loss, grad


def huber_elementwise(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber_loss(res: BatchResiduals, delta: float):
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    r = res.per_element
    n = r.size
    r64 = r.astype(np.float64)
    loss = float(np.sum(huber_elementwise(r64, delta)) / n)
    grad = ((-1.0 / n) * np.clip(r64, -delta, delta)).astype(r.dtype)
    return loss, grad


def l1_loss(res: BatchResiduals):
    """The ``delta -> 0`` limit of Huber, rescaled: mean ``|r|``."""
    r = res.per_element
    n = r.size
    r64 = r.astype(np.float64)
    return float(np.sum(np.abs(r64)) / n), (-np.sign(r64) / n).astype(r.dtype)


def lts_count(batch_size: int, lam: float) -> int:
    return max(1, int(np.floor(lam * batch_size + 1e-9)))


def lts_select(res: BatchResiduals, lam: float) -> np.ndarray:
    """Indices (ascending) of the ``max(1, floor(lam*B))`` smallest per-sample scores.

    Ties are broken by lower index (stable sort).
    """
    if not 0 < lam <= 1:
        raise ValueError(f"lambda must be in (0, 1], got {lam}")
    s = lts_count(res.batch_size, lam)
    order = np.argsort(res.per_sample_score, kind="stable")
    return np.sort(order[:s])


def lts_loss(res: BatchResiduals, lam: float, selected=None):
    """L2 over the kept samples only; trimmed samples get exactly zero gradient.

    ``selected`` pins the kept set (the selection is treated as a constant).
    """
    if selected is None:
        selected = lts_select(res, lam)
    sub = BatchResiduals(res.per_element[selected], res.per_sample_score[selected])
    loss, g_sub = l2_loss(sub)
    grad = np.zeros_like(res.per_element)
    grad[selected] = g_sub
    return loss, grad


def loss_and_grad(res: BatchResiduals, spec: RobustLossSpec, selected=None):
    """Dispatch on ``spec.kind``; returns ``(loss, grad_wrt_prediction, kept_indices)``."""
    if spec.kind == "l2":
        loss, grad = l2_loss(res)
    elif spec.kind == "huber":
        loss, grad = huber_loss(res, spec.delta)
    elif spec.kind == "l1":
        loss, grad = l1_loss(res)
    else:
        if selected is None:
            selected = lts_select(res, spec.lam)
        loss, grad = lts_loss(res, spec.lam, selected)
        return loss, grad, selected
    return loss, grad, np.arange(res.batch_size)
