"""Linear noise schedules and the per-timestep coefficient tables.

Timesteps are 1-indexed throughout the package: ``t`` ranges over
``1..T`` and the tables are looked up with ``table[t - 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable schedule holding beta, alpha, alpha_bar and sigma tables."""

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    sigmas: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "sigmas"):
            getattr(self, name).setflags(write=False)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t) - 1]

    def to_triple(self) -> dict:
        """The serialized form; derived tables are always rebuilt on load."""
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_triple(cls, d: dict) -> "NoiseSchedule":
        return linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def linear_schedule(T: int, beta_start: float = 0.001, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a schedule whose betas rise linearly from ``beta_start`` to ``beta_end``.

    The reverse-step noise scale is ``sigma_t = sqrt(beta_t)``.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    T = int(T)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        steps = np.arange(T, dtype=np.float64) / (T - 1)
        betas = beta_start + steps * (beta_end - beta_start)
        betas[-1] = beta_end
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.sqrt(betas)
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alphas, alpha_bars, sigmas)
