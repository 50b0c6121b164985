"""Training loops for DDPM and its robust variants, Adam, and checkpoints.

The loss kind selects the algorithm: ``l2`` is plain DDPM training,
``huber`` / ``l1`` the Huber variant, and ``lts`` the trimmed variant.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import gaussian_like, rng_stream
from .diffusion import forward_noise
from .losses import RobustLossSpec, loss_and_grad, residuals_from_prediction
from .model import NoisePredictor, build_predictor
from .schedule import NoiseSchedule, linear_schedule

log = logging.getLogger(__name__)

MAGIC = b"RDPM"
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-4
    loss: RobustLossSpec = field(default_factory=RobustLossSpec)
    T: int = 200
    beta_start: float = 0.001
    beta_end: float = 0.02
    seed: int = 0
    checkpoint_interval: int = 0
    max_steps: int | None = None
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = RobustLossSpec.from_config(self.loss)
        self.adam_betas = tuple(self.adam_betas)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_config()
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(theta: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """Bias-corrected Adam update of ``theta`` in place; returns ``theta``."""
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    theta -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype)
    return theta


# --------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    kept_samples: int


@dataclass
class TrainResult:
    model: NoisePredictor
    history: list
    epochs_done: int


def _train_images(dataset) -> np.ndarray:
    # PatchSet-like objects expose their train split; plain arrays are used as is
    if hasattr(dataset, "train_images"):
        return dataset.train_images()
    return np.asarray(dataset)


def train_step(model, x0, config: TrainConfig, schedule, rng, adam: AdamState):
    """One optimizer step on batch ``x0``; returns ``(loss, kept_indices, t)``."""
    B = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = gaussian_like(x0.shape, rng)
    noisy = forward_noise(x0, t, schedule, eps=eps)
    pred, cache = model.forward(noisy.x_t, t)
    res = residuals_from_prediction(eps, pred)
    loss, g_pred, kept = loss_and_grad(res, config.loss)
    if not np.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss {loss} (t={t.tolist()}, loss={config.loss.label})")
    grad = model.backward(cache, g_pred)
    optimizer_step(model.theta, grad, adam)
    return loss, kept, t


def train(dataset, config: TrainConfig, model: NoisePredictor, checkpoint_dir=None,
          on_step=None) -> TrainResult:
    """Train ``model`` in place on the train split of ``dataset``.

    Each epoch shuffles the data with the training stream and walks it in
    batches (the last partial batch is kept). ``on_step(step, model)`` is
    called after every update.
    """
    images = _train_images(dataset)
    if len(images) == 0:
        raise ValueError("empty training set")
    schedule = config.schedule()
    rng = rng_stream(config.seed, "train")
    b1, b2 = config.adam_betas
    adam = AdamState(config.learning_rate, b1, b2, config.adam_eps)
    history: list[StepRecord] = []
    step = 0
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(images))
        for start in range(0, len(order), config.batch_size):
            x0 = images[order[start:start + config.batch_size]]
            loss, kept, t = train_step(model, x0, config, schedule, rng, adam)
            step += 1
            history.append(StepRecord(step, epoch, loss, len(kept)))
            if on_step is not None:
                on_step(step, model)
            if config.max_steps is not None and step >= config.max_steps:
                break
        log.info("epoch %d: mean loss %.5f", epoch,
                 np.mean([h.loss for h in history if h.epoch == epoch]))
        if checkpoint_dir and config.checkpoint_interval and epoch % config.checkpoint_interval == 0:
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch:03d}.rdpm",
                            model, config, epoch, history)
        if config.max_steps is not None and step >= config.max_steps:
            break
    return TrainResult(model, history, epoch)


# --------------------------------------------------------------------------
# checkpoint files

def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model: NoisePredictor, config: TrainConfig, epoch: int,
                    history=()) -> None:
    """Write magic, u32 version, u32-length-prefixed JSON, u64-length-prefixed float32 params."""
    meta = {
        "model": model.config(),
        "train": config.to_dict(),
        "schedule": config.schedule().to_triple(),
        "optimizer": {"name": "adam", "lr": config.learning_rate,
                      "betas": list(config.adam_betas), "eps": config.adam_eps},
        "epoch": int(epoch),
        "loss_history": [float(h.loss) for h in history],
    }
    blob = _canonical_json(meta)
    params = np.ascontiguousarray(model.theta, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<Q", params.size))
        f.write(params.tobytes())


def load_checkpoint(path):
    """Return ``(model, meta)``; ``meta["train"]`` round-trips through :class:`TrainConfig`."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, n_json = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(data[off:off + n_json])
    off += n_json
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    params = np.frombuffer(data, dtype="<f4", count=n, offset=off)
    model = build_predictor(meta["model"])
    if model.n_params != n:
        raise ValueError(f"{path}: parameter count {n} does not match model ({model.n_params})")
    model.theta[...] = params
    return model, meta


def write_loss_csv(path, history) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "epoch", "loss", "kept_samples"])
        for h in history:
            w.writerow([h.step, h.epoch, repr(float(h.loss)), h.kept_samples])
