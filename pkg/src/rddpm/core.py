"""Shared value conventions: image arrays, named RNG streams and PNG I/O.

Images are plain numpy arrays shaped ``(C, H, W)`` (batches ``(B, C, H, W)``)
in float32. Model inputs live in ``[-1, 1]``; noisy intermediates are
unbounded.
"""
from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np

DTYPE = np.float32


def rng_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return an independent, reproducible Philox stream for ``(seed, name, *extra)``.

    Different names (``"data"``, ``"corrupt"``, ``"train"``, ...) give
    statistically independent streams; ``extra`` integers derive sub-streams
    such as one per image.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) for e in extra)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def gaussian_like(shape, rng: np.random.Generator, dtype=DTYPE) -> np.ndarray:
    """I.i.d. standard normal array of ``shape``."""
    return rng.standard_normal(shape, dtype=np.float64).astype(dtype, copy=False)


def check_image(x: np.ndarray, normalized: bool = True) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ValueError(f"expected a (C, H, W) image, got shape {x.shape}")
    if normalized and (np.any(x < -1.0) or np.any(x > 1.0)):
        raise ValueError("normalized image has values outside [-1, 1]")
    return x


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit pixels to ``[-1, 1]`` via ``2p/255 - 1``."""
    return (2.0 * np.asarray(pixels, dtype=np.float64) / 255.0 - 1.0).astype(DTYPE)


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_unit`, clamping to ``[-1, 1]`` first."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def read_png(path) -> np.ndarray:
    """Load a grayscale or RGB PNG as a ``(C, H, W)`` array in ``[-1, 1]``."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("L" if im.mode in ("1", "LA", "I", "I;16", "F") else "RGB")
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return to_unit(arr)


def write_png(path, x: np.ndarray) -> None:
    """Save a ``(C, H, W)`` or ``(H, W)`` array (C in {1, 3}) as an 8-bit PNG."""
    from PIL import Image

    x = np.asarray(x)
    if x.ndim == 3:
        x = x[0] if x.shape[0] == 1 else x.transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path)
