"""Mask reconstruction at native resolution and cleanup."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volgrid import LABEL_LEFT, LABEL_RIGHT, LabelVolume, resample_plane

DENSE_BAND_HU = (-50, 70)

_CONN26 = ndimage.generate_binary_structure(3, 3)
_CONN6 = ndimage.generate_binary_structure(3, 1)


def reassemble_mask(pred_planes, box, dims, spacing=(1.0, 1.0, 1.0)):
    """Paste network-grid label planes back into a zeroed full-resolution frame."""
    planes = np.asarray(pred_planes)
    nz, ny, nx = dims
    if planes.ndim != 3 or planes.shape[0] != nz:
        raise ValueError(f"expected {nz} planes, got array of shape {planes.shape}")
    box.check(ny, nx)
    out = np.zeros(dims, dtype=np.uint8)
    h, w = box.shape
    for z in range(nz):
        out[z, box.y0:box.y1, box.x0:box.x1] = resample_plane(planes[z], h, w, mode="nearest")
    return LabelVolume(out, spacing)


def _largest_component(region):
    lab, n = ndimage.label(region, structure=_CONN26)
    if n <= 1:
        return region
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == sizes.argmax()


def keep_largest_components(m):
    """Per lung label keep the largest 26-connected component and fill cavities.

    A cavity is a 6-connected background pocket enclosed by the label; only
    background voxels are filled, the other lung is never overwritten.
    """
    labels = np.zeros_like(m.labels)
    for lab in (LABEL_RIGHT, LABEL_LEFT):
        region = m.labels == lab
        if region.any():
            labels[_largest_component(region)] = lab
    for lab in (LABEL_RIGHT, LABEL_LEFT):
        region = labels == lab
        if region.any():
            filled = ndimage.binary_fill_holes(region, structure=_CONN6)
            labels[filled & (labels == 0)] = lab
    return LabelVolume(labels, m.spacing)


def _ball(radius):
    r = np.arange(-radius, radius + 1)
    return (r[:, None, None] ** 2 + r[None, :, None] ** 2 + r[None, None, :] ** 2) <= radius ** 2


def dense_region(m, v, open_radius=1, close_radius=2):
    """Voxels of the lung mask that :func:`remove_dense_areas` would clear."""
    if m.dims != v.dims:
        raise ValueError(f"mask dims {m.dims} differ from volume dims {v.dims}")
    lung = m.labels > 0
    lo, hi = DENSE_BAND_HU
    dense = lung & (v.values > lo) & (v.values < hi)
    if open_radius > 0:
        # opening by reconstruction: drop thin structures such as vessels, but
        # keep every voxel of a dense component that survives the opening
        core = ndimage.binary_opening(dense, structure=_ball(open_radius))
        lab, _ = ndimage.label(dense, structure=_CONN26)
        dense = np.isin(lab, np.unique(lab[core])) & (lab > 0)
    if close_radius > 0:
        pad = close_radius + 1
        dense = np.pad(dense, pad)
        dense = ndimage.binary_closing(dense, structure=_ball(close_radius))
        dense = dense[pad:-pad, pad:-pad, pad:-pad]
    return dense & lung


def remove_dense_areas(m, v, open_radius=1, close_radius=2):
    """Drop dense (-50 < HU < 70) areas such as effusions from a lung mask."""
    labels = m.labels.copy()
    labels[dense_region(m, v, open_radius, close_radius)] = 0
    return LabelVolume(labels, m.spacing)
