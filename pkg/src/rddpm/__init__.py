"""Robust denoising diffusion models for anomaly segmentation on contaminated data."""

__version__ = "0.1.0"

from .schedule import NoiseSchedule, linear_schedule
from .losses import RobustLossSpec
from .model import NetConfig, ReferenceNet, reference_net, grad_check
from .diffusion import forward_noise, reverse_step, sample, reconstruct
from .trainer import TrainConfig, train, save_checkpoint, load_checkpoint
from .metrics import auroc, auprc, masked_mse
from .corruption import CorruptionSpec, PatchSet, corrupt, generate_texture_dataset
from .segmentation import segment, segment_image
from .core import rng_stream

__all__ = [
    "NoiseSchedule", "linear_schedule", "RobustLossSpec", "NetConfig", "ReferenceNet",
    "reference_net", "grad_check", "forward_noise", "reverse_step", "sample", "reconstruct",
    "TrainConfig", "train", "save_checkpoint", "load_checkpoint", "auroc", "auprc", "masked_mse",
    "CorruptionSpec", "PatchSet", "corrupt", "generate_texture_dataset", "segment", "segment_image",
    "rng_stream",
]
