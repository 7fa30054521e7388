"""Training-time augmentation of (image, label) plane pairs.

Images are resampled bilinearly, labels by nearest neighbour. Rotation fills
samples outside the frame with 0; the elastic warp repeats the edge pixels. Randomness comes only from the generator passed
in, so a fixed seed reproduces the output bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    aug_rot_deg: float = 10.0
    aug_elastic_sigma_px: float = 6.0
    aug_noise_sigma: float = 0.02
    elastic_grid: int = 4


def _warp(image, label, coords, mode="constant"):
    img = ndimage.map_coordinates(image, coords, order=1, mode=mode, cval=0.0)
    lab = ndimage.map_coordinates(label, coords, order=0, mode=mode, cval=0)
    return img.astype(image.dtype, copy=False), lab.astype(label.dtype, copy=False)


def rotation_coords(shape, angle_deg):
    """Sampling grid that rotates a plane by ``angle_deg`` about its centre."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    dy, dx = yy - cy, xx - cx
    return np.stack([cy + c * dy - s * dx, cx + s * dy + c * dx])


def rotate_pair(image, label, angle_deg):
    if angle_deg == 0:
        return image.copy(), label.copy()
    return _warp(image, label, rotation_coords(image.shape, angle_deg))


def random_rotation(image, label, rng, max_deg=10.0):
    """Rotate both planes by one angle drawn uniformly from [-max_deg, max_deg]."""
    return rotate_pair(image, label, rng.uniform(-max_deg, max_deg))


def elastic_field(shape, rng, sigma_px=6.0, grid=4):
    """Draw a displacement field.

    Returns ``(coarse, dense)``: the (2, grid, grid) control-point
    displacements and their bicubic upsampling to (2, h, w).
    """
    coarse = rng.normal(0.0, sigma_px, size=(2, grid, grid))
    h, w = shape
    dense = np.stack([
        ndimage.zoom(coarse[k], (h / grid, w / grid), order=3, mode="nearest", grid_mode=True)
        for k in range(2)
    ])
    return coarse, dense


def warp_pair(image, label, displacement):
    """Sample both planes at ``identity + displacement`` ((2, h, w) in pixels)."""
    if not np.any(displacement):
        return image.copy(), label.copy()
    h, w = image.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    return _warp(image, label, np.stack([yy + displacement[0], xx + displacement[1]]), "nearest")


def elastic_deform(image, label, rng, sigma_px=6.0, grid=4):
    _, dense = elastic_field(image.shape, rng, sigma_px, grid)
    return warp_pair(image, label, dense)


def add_noise(image, noise):
    return np.clip(image + noise, 0.0, 1.0).astype(image.dtype, copy=False)


def gaussian_noise(image, rng, sigma=0.02):
    """Add i.i.d. N(0, sigma) noise and clamp to [0, 1]."""
    if sigma == 0:
        return image.copy()
    return add_noise(image, rng.normal(0.0, sigma, size=image.shape))


def augment_pair(image, label, rng, cfg=AugmentConfig()):
    """Rotation, elastic deformation, then noise on the image only."""
    image, label = random_rotation(image, label, rng, cfg.aug_rot_deg)
    image, label = elastic_deform(image, label, rng, cfg.aug_elastic_sigma_px, cfg.elastic_grid)
    image = gaussian_noise(image, rng, cfg.aug_noise_sigma)
    return image, label


def sample_rng(seed, *stream):
    """Independent generator for one sample, keyed by seed and stream indices."""
    return np.random.default_rng([int(seed), *map(int, stream)])
