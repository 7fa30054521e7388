"""Body cropping, HU windowing and slice preparation for the network."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volgrid import extract_slice, resample_plane

log = logging.getLogger(__name__)

HU_WINDOW = (-1024.0, 600.0)


@dataclass(frozen=True)
class PreprocessConfig:
    body_threshold_hu: float = -500.0
    closing_radius: int = 3
    box_pad: int = 5
    target_resolution: int = 256


@dataclass(frozen=True)
class CropBox:
    """In-plane crop ``[y0, y1) x [x0, x1)``. ``fallback`` marks a full-frame
    box returned because no body voxel was found."""

    y0: int
    y1: int
    x0: int
    x1: int
    fallback: bool = False

    def __post_init__(self):
        if not (0 <= self.y0 < self.y1 and 0 <= self.x0 < self.x1):
            raise ValueError(f"empty or negative crop box {self}")

    @property
    def shape(self):
        return (self.y1 - self.y0, self.x1 - self.x0)

    def check(self, ny, nx):
        if self.y1 > ny or self.x1 > nx:
            raise ValueError(f"crop box {self} exceeds frame {(ny, nx)}")


def hu_normalize(plane):
    """Map HU to [0, 1] through the window [-1024, 600]; float32 output."""
    lo, hi = HU_WINDOW
    out = (np.asarray(plane, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _disk(radius):
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


_FOUR = ndimage.generate_binary_structure(2, 1)


def body_mask_2d(plane, cfg=PreprocessConfig()):
    """Largest 4-connected above-threshold component after a disk closing."""
    fg = np.asarray(plane) > cfg.body_threshold_hu
    if not fg.any():
        return fg
    r = cfg.closing_radius
    if r > 0:
        # pad so the closing does not erode objects touching the frame
        fg = np.pad(fg, r + 1)
        fg = ndimage.binary_closing(fg, structure=_disk(r))[r + 1:-r - 1, r + 1:-r - 1]
    lab, n = ndimage.label(fg, structure=_FOUR)
    if n <= 1:
        return lab > 0
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == sizes.argmax()


def find_body_box(v, cfg=PreprocessConfig()):
    """One crop box per volume: union of per-slice body boxes, padded and clipped."""
    nz, ny, nx = v.dims
    ys, xs = [], []
    for z in range(nz):
        m = body_mask_2d(v.values[z], cfg)
        if m.any():
            rows = np.flatnonzero(m.any(axis=1))
            cols = np.flatnonzero(m.any(axis=0))
            ys += [rows[0], rows[-1]]
            xs += [cols[0], cols[-1]]
    if not ys:
        log.warning("no voxel above %s HU; using the full frame", cfg.body_threshold_hu)
        return CropBox(0, ny, 0, nx, fallback=True)
    p = cfg.box_pad
    return CropBox(
        max(min(ys) - p, 0), min(max(ys) + 1 + p, ny),
        max(min(xs) - p, 0), min(max(xs) + 1 + p, nx),
    )


def crop_plane(plane, box):
    box.check(*plane.shape)
    return plane[box.y0:box.y1, box.x0:box.x1]


def preprocess_slice(v, z, box, resolution=256):
    """Crop, bilinear-resample to ``resolution`` squared, then window to [0, 1]."""
    plane = crop_plane(extract_slice(v, z), box)
    plane = resample_plane(plane, resolution, resolution, mode="bilinear")
    return hu_normalize(plane)


def preprocess_volume(v, box, resolution=256):
    """All slices of ``v`` as an (nz, resolution, resolution) float32 stack."""
    return np.stack([preprocess_slice(v, z, box, resolution) for z in range(v.dims[0])])


def label_slices(mask, box, resolution=256):
    """Ground-truth planes cropped and nearest-resampled to the network grid."""
    return np.stack([
        resample_plane(crop_plane(mask.labels[z], box), resolution, resolution, mode="nearest")
        for z in range(mask.dims[0])
    ])
