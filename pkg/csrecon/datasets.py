"""Training images: procedural textures plus any user-supplied PGM/PPM files."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .engine import Rng
from .errors import ConfigError, ShapeError
from .netpbm import IMAGE_SUFFIXES, read_image, to_luma

logger = logging.getLogger(__name__)


def synthetic_texture(rng: Rng, size: int, channels: int = 1) -> np.ndarray:
    """One procedural image in [0, 1]: smooth noise, stripes, and a few discs."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    sigma = float(rng.uniform(1, 1.0, 4.0)[0])
    planes = []
    for _ in range(channels):
        smooth = ndimage.gaussian_filter(rng.normal((size, size), dtype=np.float64), sigma=sigma * size / 32)
        smooth = (smooth - smooth.min()) / (np.ptp(smooth) + 1e-12)
        angle, freq, phase = rng.uniform(3, 0.0, 1.0) * np.array([np.pi, 12.0, 2 * np.pi])
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        img = 0.6 * smooth + 0.4 * stripes
        for cx, cy, r, level in rng.uniform((3, 4), 0.0, 1.0):
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < (0.05 + 0.15 * r) ** 2
            img = np.where(mask, level, img)
        planes.append(img)
    return np.clip(np.stack(planes), 0.0, 1.0).astype(np.float32)


def synthetic_textures(count: int, size: int, channels: int, rng: Rng) -> List[np.ndarray]:
    return [synthetic_texture(rng.derive(f"texture/{i}"), size, channels) for i in range(count)]


def load_image_dir(path: Union[str, Path], channels: int) -> Tuple[List[str], List[np.ndarray]]:
    """All PGM/PPM/RCSI files of ``path`` in name order, converted to ``channels``."""
    folder = Path(path)
    if not folder.is_dir():
        raise ConfigError(f"image directory not found: {folder}")
    names, images = [], []
    for file in sorted(folder.iterdir()):
        if file.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        img = read_image(file)
        if img.shape[0] != channels:
            img = to_luma(img) if channels == 1 else np.repeat(img[:1], 3, axis=0)
        names.append(file.name)
        images.append(img.astype(np.float32))
    if not images:
        raise ConfigError(f"no PGM/PPM/RCSI images in {folder}")
    return names, images


def crop_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    _, h, w = image.shape
    h2, w2 = h - h % multiple, w - w % multiple
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"image {h}x{w} is smaller than one {multiple}x{multiple} tile")
    return image[:, :h2, :w2]


class PatchDataset:
    """Random square patches drawn from a fixed pool of images."""

    def __init__(self, images: Sequence[np.ndarray], patch_size: int) -> None:
        self.images = [img for img in images if min(img.shape[1:]) >= patch_size]
        if not self.images:
            raise ShapeError(f"no image is at least {patch_size}x{patch_size}")
        self.patch_size = patch_size

    def __len__(self) -> int:
        return len(self.images)

    def patch(self, rng: Rng) -> np.ndarray:
        img = self.images[int(rng.integers(0, len(self.images)))]
        _, h, w = img.shape
        p = self.patch_size
        top = int(rng.integers(0, h - p + 1))
        left = int(rng.integers(0, w - p + 1))
        return np.ascontiguousarray(img[:, top:top + p, left:left + p])

    def batch(self, rng: Rng, size: int) -> List[np.ndarray]:
        return [self.patch(rng) for _ in range(size)]


def build_dataset(patch_size: int, channels: int, count: int, rng: Rng,
                  data_dir: Optional[str] = None) -> PatchDataset:
    images = synthetic_textures(count, max(patch_size * 2, 64), channels, rng.derive("textures"))
    if data_dir:
        _, extra = load_image_dir(data_dir, channels)
        images.extend(extra)
        logger.info("loaded %d user images from %s", len(extra), data_dir)
    return PatchDataset(images, patch_size)


def validation_patches(patch_size: int, channels: int, count: int, rng: Rng) -> List[np.ndarray]:
    """Held-out patches from textures the training pool never sees."""
    return synthetic_textures(count, patch_size, channels, rng.derive("validation"))
