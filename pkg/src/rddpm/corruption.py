"""Synthetic texture patches, the block-intensity contamination protocol,
an MVTec-layout loader, and the on-disk patch cache."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import DTYPE, read_png

TRAIN, EVAL = 0, 1
CACHE_MAGIC = b"RDPD"
CACHE_VERSION = 1


@dataclass(frozen=True)
class CorruptionSpec:
    contamination_ratio: float = 0.0
    block_fraction: float = 0.7
    intensity_factor: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.contamination_ratio <= 1.0:
            raise ValueError(f"contamination_ratio must be in [0, 1], got {self.contamination_ratio}")
        if not 0.0 < self.block_fraction <= 1.0:
            raise ValueError(f"block_fraction must be in (0, 1], got {self.block_fraction}")
        if not self.intensity_factor > 1.0:
            raise ValueError(f"intensity_factor must exceed 1, got {self.intensity_factor}")


@dataclass
class LabeledPatch:
    image: np.ndarray  # (C, H, W)
    pixel_mask: np.ndarray  # (H, W) uint8, 1 = anomalous
    is_contaminated: bool
    split: int = TRAIN


@dataclass
class PatchSet:
    """Column-oriented collection of labeled patches.

    ``images`` is ``(N, C, H, W)`` float32, ``masks`` ``(N, H, W)`` uint8,
    ``contaminated`` and ``split`` are ``(N,)`` arrays.
    """

    images: np.ndarray
    masks: np.ndarray
    contaminated: np.ndarray
    split: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> LabeledPatch:
        return LabeledPatch(self.images[i], self.masks[i], bool(self.contaminated[i]), int(self.split[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "PatchSet":
        return PatchSet(self.images[idx], self.masks[idx], self.contaminated[idx],
                        self.split[idx], dict(self.meta))

    def train_images(self) -> np.ndarray:
        return self.images[self.split == TRAIN]

    def eval_set(self) -> "PatchSet":
        return self.subset(np.flatnonzero(self.split == EVAL))

    @classmethod
    def from_patches(cls, patches) -> "PatchSet":
        patches = list(patches)
        return cls(np.stack([p.image for p in patches]).astype(DTYPE),
                   np.stack([p.pixel_mask for p in patches]).astype(np.uint8),
                   np.array([p.is_contaminated for p in patches], dtype=bool),
                   np.array([p.split for p in patches], dtype=np.uint8))

    @classmethod
    def concat(cls, sets) -> "PatchSet":
        sets = list(sets)
        return cls(np.concatenate([s.images for s in sets]),
                   np.concatenate([s.masks for s in sets]),
                   np.concatenate([s.contaminated for s in sets]),
                   np.concatenate([s.split for s in sets]),
                   dict(sets[0].meta))


# --------------------------------------------------------------------------
# textures

@dataclass(frozen=True)
class TextureParams:
    """A texture "category": a fixed family of gratings shared by every patch.

    Each patch gets random phases plus small jitter of orientation,
    frequency and amplitude, and additive pixel noise.
    """

    size: int = 28
    channels: int = 1
    min_components: int = 2
    max_components: int = 4
    freq_range: tuple = (0.08, 0.22)  # cycles per pixel
    orientation_jitter: float = 0.08  # radians
    freq_jitter: float = 0.05  # relative
    amplitude: float = 0.85
    noise: float = 0.03
    category_seed: int = 7


def _category(params: TextureParams):
    rng = np.random.default_rng(params.category_seed)
    k = int(rng.integers(params.min_components, params.max_components + 1))
    theta = rng.uniform(0, np.pi, k)
    freq = rng.uniform(*params.freq_range, k)
    weight = rng.dirichlet(np.full(k, 4.0))
    return theta, freq, weight


def generate_texture_dataset(n_patches: int, params: TextureParams | None = None,
                             rng: np.random.Generator | None = None, split: int = TRAIN) -> PatchSet:
    """``n_patches`` clean texture patches in ``(-1, 1)`` with empty masks."""
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    params = params or TextureParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    theta0, freq0, weight0 = _category(params)
    k = len(theta0)
    s, c = params.size, params.channels
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    theta = theta0 + params.orientation_jitter * rng.standard_normal((n_patches, k))
    freq = freq0 * (1.0 + params.freq_jitter * rng.standard_normal((n_patches, k)))
    amp = weight0 * rng.uniform(0.8, 1.2, (n_patches, k))
    amp *= params.amplitude / amp.sum(axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, (n_patches, k))
    proj = (np.cos(theta)[..., None, None] * xx + np.sin(theta)[..., None, None] * yy)
    waves = np.sin(2 * np.pi * freq[..., None, None] * proj + phase[..., None, None])
    img = np.einsum("nk,nkhw->nhw", amp, waves)[:, None]
    if c > 1:
        img = np.repeat(img, c, axis=1) * rng.uniform(0.85, 1.0, (n_patches, c, 1, 1))
    img = img + params.noise * rng.standard_normal(img.shape)
    # strictly inside (-1, 1) so every multiplied pixel actually changes
    img = np.clip(img, -0.995, 0.995).astype(DTYPE)
    return PatchSet(img, np.zeros((n_patches, s, s), np.uint8),
                    np.zeros(n_patches, bool), np.full(n_patches, split, np.uint8),
                    {"texture": asdict(params)})


# --------------------------------------------------------------------------
# contamination

def amplify(values: np.ndarray, factor: float) -> np.ndarray:
    """Multiply intensities in ``[0, 2]`` offset space and clamp back to ``[-1, 1]``."""
    return np.clip((values.astype(np.float64) + 1.0) * factor - 1.0, -1.0, 1.0).astype(DTYPE)


def _block_grid(h, w):
    if h % 2 or w % 2:
        raise ValueError(f"patch side must be divisible by 2, got {h}x{w}")
    return h // 2, w // 2


def corrupt_patch(image: np.ndarray, block_fraction: float, factor: float, rng,
                  region=None):
    """Amplify ``round(block_fraction * n_blocks)`` random 2x2 blocks of one patch.

    ``region`` = ``(by0, bx0, by1, bx1)`` restricts the candidate blocks to a
    rectangle in block coordinates. Returns ``(new_image, mask)``.
    """
    _, h, w = image.shape
    gh, gw = _block_grid(h, w)
    by0, bx0, by1, bx1 = region if region is not None else (0, 0, gh, gw)
    cand = np.array([(by, bx) for by in range(by0, by1) for bx in range(bx0, bx1)])
    n_sel = int(np.floor(block_fraction * len(cand) + 0.5))
    chosen = cand[rng.choice(len(cand), size=n_sel, replace=False)]
    block_mask = np.zeros((gh, gw), bool)
    block_mask[chosen[:, 0], chosen[:, 1]] = True
    mask = np.repeat(np.repeat(block_mask, 2, axis=0), 2, axis=1)
    out = image.copy()
    out[:, mask] = amplify(image[:, mask], factor)
    return out, mask.astype(np.uint8)


def corrupt(patches: PatchSet, spec: CorruptionSpec, rng=None) -> PatchSet:
    """Contaminate exactly ``round(ratio * n)`` patches chosen uniformly at random.

    Untouched pixels are copied bit for bit.
    """
    from .core import rng_stream

    rng = rng if rng is not None else rng_stream(spec.seed, "corrupt")
    n = len(patches)
    _block_grid(*patches.images.shape[2:])
    n_bad = int(np.floor(spec.contamination_ratio * n + 0.5))
    which = np.sort(rng.choice(n, size=n_bad, replace=False))
    out = PatchSet(patches.images.copy(), patches.masks.copy(), patches.contaminated.copy(),
                   patches.split.copy(), {**patches.meta, "corruption": asdict(spec)})
    for i in which:
        img, mask = corrupt_patch(patches.images[i], spec.block_fraction, spec.intensity_factor, rng)
        out.images[i] = img
        out.masks[i] |= mask
        out.contaminated[i] = True
    return out


def add_local_defects(patches: PatchSet, rng, factor: float = 5.0, side_range=(3, 6),
                      block_fraction: float = 1.0, split: int = EVAL) -> PatchSet:
    """Give every patch one rectangular defect of amplified 2x2 blocks.

    The defect side (in blocks) is drawn from ``side_range`` inclusive. Used
    to build evaluation sets with pixel-exact ground truth.
    """
    out = patches.subset(np.arange(len(patches)))
    gh, gw = _block_grid(*patches.images.shape[2:])
    for i in range(len(out)):
        sh, sw = rng.integers(side_range[0], side_range[1] + 1, size=2)
        by = int(rng.integers(0, gh - sh + 1))
        bx = int(rng.integers(0, gw - sw + 1))
        img, mask = corrupt_patch(out.images[i], block_fraction, factor, rng,
                                  region=(by, bx, by + sh, bx + sw))
        out.images[i] = img
        out.masks[i] |= mask
        out.contaminated[i] = True
    out.split[:] = split
    return out


# --------------------------------------------------------------------------
# tiling and the MVTec layout

def tile_offsets(h: int, w: int, patch: int, stride: int | None = None):
    """Top-left corners of full ``patch x patch`` tiles (remainder discarded)."""
    stride = stride or patch
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} smaller than patch {patch}")
    return [(y, x) for y in range(0, h - patch + 1, stride) for x in range(0, w - patch + 1, stride)]


def extract_patches(image: np.ndarray, patch: int = 28, stride: int | None = None):
    _, h, w = image.shape
    offs = tile_offsets(h, w, patch, stride)
    return np.stack([image[:, y:y + patch, x:x + patch] for y, x in offs]), offs


def _resize(arr: np.ndarray, size: int, resample) -> np.ndarray:
    from PIL import Image

    chans = [np.asarray(Image.fromarray(a.astype(np.float32), mode="F").resize((size, size), resample))
             for a in arr]
    return np.stack(chans).astype(DTYPE)


def load_mvtec_layout(root, category: str | None = None, resolution: int = 100, patch: int = 28,
                      include_train: bool = True, include_test: bool = True,
                      contaminate_with_real: float = 0.0, seed: int = 0) -> PatchSet:
    """Load ``<root>/<category>/{train/good, test/<defect>, ground_truth/<defect>}``.

    Images are bilinearly resized to ``resolution`` and tiled into
    non-overlapping ``patch``-sized tiles. Defective test images go to the
    eval split unless ``contaminate_with_real`` > 0 moves that fraction of
    them into training.
    """
    from PIL import Image

    from .core import rng_stream

    base = Path(root) / category if category else Path(root)
    if not base.is_dir():
        raise FileNotFoundError(f"no such dataset directory: {base}")
    pieces: list[PatchSet] = []

    def add(path: Path, mask_path, split):
        try:
            img = read_png(path)
        except Exception as exc:  # noqa: BLE001 - re-raised with path context
            raise OSError(f"cannot read image {path}: {exc}") from exc
        img = _resize(img, resolution, Image.BILINEAR)
        if mask_path is None:
            mask = np.zeros((resolution, resolution), np.uint8)
        else:
            m = read_png(mask_path)[:1]
            mask = (_resize(m, resolution, Image.NEAREST)[0] > 0).astype(np.uint8)
        tiles, offs = extract_patches(img, patch)
        masks = np.stack([mask[y:y + patch, x:x + patch] for y, x in offs])
        bad = masks.reshape(len(masks), -1).any(axis=1)
        pieces.append(PatchSet(tiles, masks, bad, np.full(len(tiles), split, np.uint8)))

    if include_train:
        for p in sorted((base / "train" / "good").glob("*.png")):
            add(p, None, TRAIN)
    if include_test:
        test_dir = base / "test"
        defects = sorted(d for d in test_dir.iterdir() if d.is_dir()) if test_dir.is_dir() else []
        rng = rng_stream(seed, "mvtec-contaminate")
        for d in defects:
            for p in sorted(d.glob("*.png")):
                if d.name == "good":
                    add(p, None, EVAL)
                    continue
                mp = base / "ground_truth" / d.name / f"{p.stem}_mask.png"
                if not mp.exists():
                    raise FileNotFoundError(f"missing ground-truth mask for {p}: expected {mp}")
                split = TRAIN if contaminate_with_real > 0 and rng.random() < contaminate_with_real else EVAL
                add(p, mp, split)
    if not pieces:
        raise FileNotFoundError(f"no PNG images found under {base}")
    out = PatchSet.concat(pieces)
    out.meta = {"source": "mvtec", "root": str(base), "resolution": resolution, "patch": patch}
    return out


# --------------------------------------------------------------------------
# cache file

def save_cache(path, patches: PatchSet, spec: dict | None = None) -> None:
    """Header (magic, version, JSON with count/shape/spec), then per patch:
    float32 image, bit-packed mask, one flag byte (bit0 contaminated, bit1 eval)."""
    n, c, h, w = patches.images.shape
    header = json.dumps({"count": n, "shape": [c, h, w], "spec": spec or {}, "meta": patches.meta},
                        sort_keys=True, separators=(",", ":")).encode()
    mask_bytes = (h * w + 7) // 8
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    imgs = patches.images.astype("<f4").reshape(n, -1)
    packed = np.packbits(patches.masks.reshape(n, -1).astype(bool), axis=1)
    flags = (patches.contaminated.astype(np.uint8) | (patches.split.astype(np.uint8) == EVAL) << 1)
    rec = np.zeros(n, dtype=[("img", "<f4", (c * h * w,)), ("mask", "u1", (mask_bytes,)), ("flags", "u1")])
    rec["img"], rec["mask"], rec["flags"] = imgs, packed, flags
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<II", CACHE_VERSION, len(header)))
        f.write(header)
        f.write(rec.tobytes())


def load_cache(path) -> tuple[PatchSet, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a patch cache")
    version, nh = struct.unpack_from("<II", data, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    header = json.loads(data[12:12 + nh])
    n = header["count"]
    c, h, w = header["shape"]
    mask_bytes = (h * w + 7) // 8
    dt = np.dtype([("img", "<f4", (c * h * w,)), ("mask", "u1", (mask_bytes,)), ("flags", "u1")])
    rec = np.frombuffer(data, dtype=dt, count=n, offset=12 + nh)
    masks = np.unpackbits(rec["mask"], axis=1, count=h * w).reshape(n, h, w)
    ps = PatchSet(rec["img"].reshape(n, c, h, w).astype(DTYPE), masks.astype(np.uint8),
                  (rec["flags"] & 1).astype(bool), ((rec["flags"] >> 1) & 1).astype(np.uint8),
                  header.get("meta", {}))
    return ps, header
