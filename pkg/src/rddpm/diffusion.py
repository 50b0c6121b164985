"""Forward noising, ancestral reverse steps and partial-chain reconstruction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DTYPE, gaussian_like
from .schedule import NoiseSchedule


@dataclass
class NoisySample:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; fields may carry a batch axis."""

    x_t: np.ndarray
    eps: np.ndarray
    t: np.ndarray


def _coef(values, t, ndim):
    c = np.asarray(values[np.asarray(t) - 1], dtype=np.float64)
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def forward_noise(x0, t, schedule: NoiseSchedule, rng=None, eps=None) -> NoisySample:
    """Jump straight from ``x0`` to step ``t``.

    ``t`` may be a scalar or, for a batch ``(B, C, H, W)``, one timestep per
    sample. Pass ``eps`` to fix the injected noise instead of drawing it.
    """
    x0 = np.asarray(x0, dtype=DTYPE)
    t = np.asarray(t, dtype=np.int64)
    schedule.check_t(t)
    if eps is None:
        eps = gaussian_like(x0.shape, rng)
    eps = np.asarray(eps, dtype=DTYPE)
    ab = _coef(schedule.alpha_bars, t, x0.ndim if t.ndim else 0)
    x_t = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(DTYPE)
    return NoisySample(x_t, eps, t)


def posterior_mean(x_t, eps_hat, t, schedule: NoiseSchedule):
    """The deterministic part of a reverse step."""
    a = schedule.alphas[t - 1]
    ab = schedule.alpha_bars[t - 1]
    return (x_t - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)


def reverse_step(x_t, t: int, model, schedule: NoiseSchedule, rng=None, sigma=None):
    """One ancestral step ``x_t -> x_{t-1}``; no noise is added at ``t = 1``.

    ``x_t`` is a batch ``(B, C, H, W)``. ``rng`` is a generator or a list of
    generators, one per image. ``sigma`` overrides the schedule's sigma_t.
    """
    t = int(t)
    schedule.check_t(t)
    x_t = np.asarray(x_t, dtype=DTYPE)
    eps_hat = model(x_t, np.full(x_t.shape[0], t))
    out = posterior_mean(x_t.astype(np.float64), eps_hat.astype(np.float64), t, schedule)
    s = schedule.sigmas[t - 1] if sigma is None else sigma
    if t > 1 and s != 0:
        out = out + s * _draw(x_t.shape, rng)
    return out.astype(DTYPE)


def _draw(shape, rng):
    if isinstance(rng, (list, tuple)):
        if len(rng) != shape[0]:
            raise ValueError("need one generator per image")
        return np.stack([gaussian_like(shape[1:], g) for g in rng])
    return gaussian_like(shape, rng)


def run_chain(x_t, t_start: int, model, schedule: NoiseSchedule, rng=None, sigma=None):
    """Apply reverse steps ``t_start, ..., 1`` and return ``x_0``."""
    x = x_t
    for t in range(t_start, 0, -1):
        x = reverse_step(x, t, model, schedule, rng, sigma=sigma)
    return x


def sample(model, schedule: NoiseSchedule, shape, rng) -> np.ndarray:
    """Unconditional ancestral sampling from ``x_T ~ N(0, I)``; ``shape`` includes the batch axis."""
    x = _draw(tuple(shape), rng)
    return run_chain(x, schedule.T, model, schedule, rng)


def noising_steps(fraction: float, T: int) -> int:
    if not 0 < fraction <= 1:
        raise ValueError(f"noising fraction must be in (0, 1], got {fraction}")
    # round half up so 0.25 * 1000 -> 250 and tiny fractions still take a step
    return max(1, min(T, int(np.floor(fraction * T + 0.5))))


def reconstruct(x_in, noising_fraction: float, model, schedule: NoiseSchedule, rng) -> np.ndarray:
    """Noise ``x_in`` to ``t* = round(fraction * T)`` then denoise back to step 0.

    ``x_in`` is a batch; ``rng`` is one generator shared by the batch or a
    list of per-image generators (the forward noise and every reverse-step
    draw for image ``i`` then come from ``rng[i]``).
    """
    x_in = np.asarray(x_in, dtype=DTYPE)
    t_star = noising_steps(noising_fraction, schedule.T)
    eps = _draw(x_in.shape, rng)
    noisy = forward_noise(x_in, t_star, schedule, eps=eps)
    return run_chain(noisy.x_t, t_star, model, schedule, rng)
