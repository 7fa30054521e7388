"""Synthetic chest CT phantoms with exact ground truth.

A phantom is an elliptic body cylinder in air with two lungs (super-ellipsoids
that taper towards apex and base), a trachea that is labelled background, and
a liver-like dense block below the right lung. The ``diverse`` profile adds
pathologies that the lung label must include: dense tumours attached to the
lung wall, dependent pleural effusions and consolidations.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .volgrid import (
    LABEL_LEFT,
    LABEL_RIGHT,
    DatasetManifest,
    LabelVolume,
    ManifestEntry,
    Volume3,
    save_manifest,
    save_mask,
    save_volume,
)

HU_AIR = -1000
HU_BODY = 40
HU_LUNG = -800
HU_TRACHEA = -950
HU_LIVER = 60
HU_TUMOR = 30
HU_EFFUSION = 20
HU_CONSOLIDATION = -100

# tissue codes of the construction map
AIR, BODY, PARENCHYMA, TRACHEA, LIVER, TUMOR, EFFUSION, CONSOLIDATION = range(8)
_TISSUE_HU = np.array(
    [HU_AIR, HU_BODY, HU_LUNG, HU_TRACHEA, HU_LIVER, HU_TUMOR, HU_EFFUSION, HU_CONSOLIDATION],
    dtype=np.float64,
)

PROFILES = ("healthy", "diverse")


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (32, 64, 64)
    spacing: tuple = (2.5, 1.25, 1.25)
    profile: str = "healthy"
    tumor_prob: float = 0.5
    effusion_prob: float = 0.5
    consolidation_prob: float = 0.5
    noise_sigma_hu: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise PhantomError(f"unknown profile {self.profile!r}")
        for name in ("tumor_prob", "effusion_prob", "consolidation_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise PhantomError(f"{name} must lie in [0, 1], got {p}")
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise PhantomError(f"dims must be at least 16 in every axis, got {self.dims}")
        if self.noise_sigma_hu < 0:
            raise PhantomError("noise_sigma_hu must be >= 0")


@dataclass(frozen=True)
class Phantom:
    image: Volume3
    mask: LabelVolume
    tumor_mask: np.ndarray
    tissue: np.ndarray
    lesions: tuple  # subset of ("tumor", "effusion", "consolidation")


def _lung(zz, yy, xx, c, r):
    t = np.abs((zz - c[0]) / r[0]) ** 4
    return t + ((yy - c[1]) / r[1]) ** 2 + ((xx - c[2]) / r[2]) ** 2 <= 1.0


def build(cfg):
    """Generate one phantom with its tissue map and lesion flags."""
    nz, ny, nx = cfg.dims
    rng = np.random.default_rng(cfg.seed)
    u = rng.uniform
    zz, yy, xx = np.meshgrid(
        np.arange(nz, dtype=float), np.arange(ny, dtype=float), np.arange(nx, dtype=float),
        indexing="ij",
    )
    tissue = np.full(cfg.dims, AIR, dtype=np.uint8)

    cy = (ny - 1) / 2 + u(-0.03, 0.03) * ny
    cx = (nx - 1) / 2 + u(-0.03, 0.03) * nx
    by, bx = ny * u(0.36, 0.42), nx * u(0.40, 0.46)
    body = ((yy - cy) / by) ** 2 + ((xx - cx) / bx) ** 2 <= 1.0
    tissue[body] = BODY

    zc, lz = nz * u(0.50, 0.56), nz * u(0.30, 0.36)
    dx = bx * u(0.46, 0.52)
    lungs = {}
    for label, side in ((LABEL_RIGHT, -1), (LABEL_LEFT, +1)):
        s = u(0.92, 1.08)
        centre = (zc + u(-0.5, 0.5), cy + by * u(-0.04, 0.06), cx + side * dx)
        radii = (lz * s, by * u(0.62, 0.70) * s, bx * u(0.30, 0.34) * s)
        lungs[label] = (centre, radii)
    if min(r for _, radii in lungs.values() for r in radii) < 2.0:
        raise PhantomError(f"dims {cfg.dims} too small to place the lungs")

    labels = np.zeros(cfg.dims, dtype=np.uint8)
    for label, (centre, radii) in lungs.items():
        region = _lung(zz, yy, xx, centre, radii) & body
        labels[region] = label
        tissue[region] = PARENCHYMA

    # trachea: background even where it cuts into lung
    tr = max(1.5, nx * u(0.03, 0.045))
    tcy = cy - by * u(0.2, 0.3)
    trachea = (((yy - tcy) ** 2 + (xx - cx) ** 2) <= tr * tr) & (zz <= zc - 0.2 * lz)
    tissue[trachea] = TRACHEA
    labels[trachea] = 0

    # liver block below the right lung
    rc, rr = lungs[LABEL_RIGHT]
    liver_c = (rc[0] + rr[0] * u(0.9, 1.1), rc[1], rc[2] + bx * 0.15)
    liver_r = (rr[0] * 0.7, rr[1] * 1.1, rr[2] * 1.6)
    liver = _lung(zz, yy, xx, liver_c, liver_r) & body & (labels == 0) & ~trachea
    tissue[liver] = LIVER

    lesions = []
    tumor = np.zeros(cfg.dims, dtype=bool)
    if cfg.profile == "diverse":
        draws = rng.random(3)
        if draws[2] < cfg.consolidation_prob:
            lesions.append("consolidation")
            for _ in range(int(rng.integers(1, 4))):
                label = int(rng.integers(1, 3))
                (c, r) = lungs[label]
                bc = (c[0] + u(-0.4, 0.4) * r[0], c[1] + u(-0.4, 0.4) * r[1], c[2] + u(-0.4, 0.4) * r[2])
                br = (u(1.5, 3.0), u(3.0, 5.0), u(3.0, 5.0))
                blob = _lung(zz, yy, xx, bc, br) & (labels == label)
                tissue[blob] = CONSOLIDATION
        if draws[1] < cfg.effusion_prob:
            lesions.append("effusion")
            sides = [s for s in (LABEL_RIGHT, LABEL_LEFT) if rng.random() < 0.5] or [
                int(rng.integers(1, 3))
            ]
            for label in sides:
                (c, r) = lungs[label]
                level = c[1] + r[1] * (1.0 - 2.0 * u(0.18, 0.32))
                fluid = (labels == label) & (yy >= level)
                tissue[fluid] = EFFUSION
        if draws[0] < cfg.tumor_prob:
            lesions.append("tumor")
            label = int(rng.integers(1, 3))
            (c, r) = lungs[label]
            tz = c[0] + u(-0.4, 0.4) * r[0]
            scale = np.sqrt(max(1.0 - ((tz - c[0]) / r[0]) ** 4, 0.0))
            # a point on the lung wall facing the chest wall (lateral or anterior)
            side = -1.0 if label == LABEL_RIGHT else 1.0
            ang = u(-0.5, 1.3) * np.pi / 2
            py = c[1] - r[1] * scale * np.sin(ang)
            px = c[2] + side * r[2] * scale * np.cos(ang)
            rad = nx * u(0.07, 0.10)
            rz = rad * cfg.spacing[1] / cfg.spacing[0]
            sphere = ((zz - tz) / rz) ** 2 + ((yy - py) / rad) ** 2 + ((xx - px) / rad) ** 2 <= 1.0
            tumor = sphere & (labels == label)
            tissue[tumor] = TUMOR

    hu = _TISSUE_HU[tissue]
    if cfg.noise_sigma_hu > 0:
        hu = hu + rng.normal(0.0, cfg.noise_sigma_hu, size=cfg.dims)
    hu = np.clip(np.rint(hu), -32768, 32767).astype(np.int16)
    tissue.flags.writeable = False
    tumor.flags.writeable = False
    return Phantom(
        Volume3(hu, cfg.spacing),
        LabelVolume(labels, cfg.spacing),
        tumor,
        tissue,
        tuple(lesions),
    )


def generate(cfg):
    """Return ``(image, labels, tumor_mask)`` for one phantom."""
    ph = build(cfg)
    return ph.image, ph.mask, ph.tumor_mask


def generate_dataset(n, template, out_dir, split="train", prefix="case"):
    """Write ``n`` phantoms (seeds ``template.seed + i``) plus ``manifest.csv``."""
    if n < 1:
        raise PhantomError("n must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n):
        cfg = replace(template, seed=template.seed + i)
        ph = build(cfg)
        cid = f"{prefix}{i:03d}"
        img = os.path.join(out_dir, f"{cid}_image.rvol")
        msk = os.path.join(out_dir, f"{cid}_mask.rvol")
        save_volume(ph.image, img)
        save_mask(ph.mask, msk)
        tags = [cfg.profile, f"seed={cfg.seed}", *ph.lesions]
        if ph.tumor_mask.any():
            tpath = os.path.join(out_dir, f"{cid}_tumor.rvol")
            save_mask(LabelVolume(ph.tumor_mask.astype(np.uint8), cfg.spacing), tpath)
            tags.append(f"tumor_mask={tpath}")
        entries.append(ManifestEntry(cid, img, msk, split, tuple(tags)))
    manifest = DatasetManifest(tuple(entries))
    save_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    return manifest
