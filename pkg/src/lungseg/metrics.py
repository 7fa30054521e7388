"""Overlap and surface-distance metrics, per-lung evaluation, aggregation and
paired t-tests.

Surface distances use unweighted boundary-voxel centres: a foreground voxel is
on the surface if any of its six face neighbours is background or lies outside
the grid. Coordinates are voxel index times spacing, in mm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volgrid import LABEL_LEFT, LABEL_RIGHT

_CONN6 = ndimage.generate_binary_structure(3, 1)


class GridMismatchError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


def _pair(x, y):
    x, y = np.asarray(x, dtype=bool), np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise GridMismatchError(f"grids differ: {x.shape} vs {y.shape}")
    return x, y


def dice(x, y):
    """2|X & Y| / (|X| + |Y|); 1.0 when both regions are empty."""
    x, y = _pair(x, y)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


def surface_mask(mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3-D mask, got shape {mask.shape}")
    inner = ndimage.binary_erosion(mask, structure=_CONN6, border_value=0)
    return mask & ~inner


def extract_surface(mask, spacing):
    """(k, 3) array of surface voxel centres in mm, in z, y, x order."""
    idx = np.argwhere(surface_mask(mask))
    return idx * np.asarray(spacing, dtype=np.float64)


def directed_distances(src, dst):
    """Distance from every point of ``src`` to its nearest point of ``dst``."""
    if len(src) == 0 or len(dst) == 0:
        raise UndefinedMetricError("surface distance needs two non-empty surfaces")
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def _surfaces(x, y, spacing):
    x, y = _pair(x, y)
    if not x.any() or not y.any():
        raise UndefinedMetricError("surface metrics are undefined for an empty region")
    return extract_surface(x, spacing), extract_surface(y, spacing)


def hd95(x, y, spacing):
    """Symmetric robust Hausdorff distance: max of both directed 95th percentiles."""
    xs, ys = _surfaces(x, y, spacing)
    return float(max(
        np.percentile(directed_distances(xs, ys), 95),
        np.percentile(directed_distances(ys, xs), 95),
    ))


def msd(x, y, spacing):
    """Symmetric mean surface distance: max of both directed means."""
    xs, ys = _surfaces(x, y, spacing)
    return float(max(directed_distances(xs, ys).mean(), directed_distances(ys, xs).mean()))


def hausdorff(x, y, spacing):
    xs, ys = _surfaces(x, y, spacing)
    return float(max(directed_distances(xs, ys).max(), directed_distances(ys, xs).max()))


def tumor_overlap(lung_mask, tumor_mask):
    """Fraction of the tumour volume covered by the lung mask."""
    lung, tumor = _pair(lung_mask, tumor_mask)
    n = int(tumor.sum())
    if n == 0:
        raise UndefinedMetricError("tumour region is empty")
    return int((lung & tumor).sum()) / n


# --------------------------------------------------------------------------
# case evaluation


STRUCTURES = ("right", "left", "combined", "averaged")


@dataclass(frozen=True)
class CaseReport:
    case_id: str
    structure: str
    dsc: float
    hd95_mm: float
    msd_mm: float
    flags: tuple = ()
    tumor_overlap: float | None = None

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown structure {self.structure!r}")


def evaluate_region(case_id, structure, pred, gt, spacing):
    """Metrics for one binary structure. An empty prediction scores DSC 0 and
    NaN distances (flagged ``empty_pred``)."""
    d = dice(pred, gt)
    if not np.any(pred):
        return CaseReport(case_id, structure, d, math.nan, math.nan, ("empty_pred",))
    return CaseReport(case_id, structure, d, hd95(pred, gt, spacing), msd(pred, gt, spacing))


def evaluate_structures(pred, gt, case_id="case"):
    """Right and left lung reports; structures absent from ``gt`` are skipped."""
    if pred.dims != gt.dims:
        raise GridMismatchError(f"grids differ: {pred.dims} vs {gt.dims}")
    out = []
    for lab, name in ((LABEL_RIGHT, "right"), (LABEL_LEFT, "left")):
        g = gt.labels == lab
        if g.any():
            out.append(evaluate_region(case_id, name, pred.labels == lab, g, gt.spacing))
    return out


def evaluate_case(pred, gt, mode="per_lung", case_id="case"):
    """Per-lung mode averages the right and left scores; combined mode scores
    the union of both lung labels."""
    if pred.dims != gt.dims:
        raise GridMismatchError(f"grids differ: {pred.dims} vs {gt.dims}")
    if mode == "combined":
        g = gt.labels > 0
        if not g.any():
            raise UndefinedMetricError(f"{case_id}: ground truth has no lung")
        r = evaluate_region(case_id, "combined", pred.labels > 0, g, gt.spacing)
        return r
    if mode != "per_lung":
        raise ValueError(f"unknown mode {mode!r}")
    parts = evaluate_structures(pred, gt, case_id)
    if not parts:
        raise UndefinedMetricError(f"{case_id}: ground truth has no lung")
    flags = [f"skipped_{s}" for s in ("right", "left") if s not in {p.structure for p in parts}]
    for p in parts:
        flags += [f"{p.structure}_{f}" for f in p.flags]
    return CaseReport(
        case_id,
        "averaged",
        sum(p.dsc for p in parts) / len(parts),
        sum(p.hd95_mm for p in parts) / len(parts),
        sum(p.msd_mm for p in parts) / len(parts),
        tuple(flags),
    )


# --------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class Summary:
    mean: float
    sd: float
    n: int
    flags: tuple = field(default=())


METRICS = ("dsc", "hd95_mm", "msd_mm")


def summarize(values):
    """Mean and sample SD (n - 1); NaNs are excluded and counted in ``flags``."""
    vals = sorted(v for v in values if v is not None and not math.isnan(v))
    dropped = len(values) - len(vals)
    flags = (f"nan_excluded={dropped}",) if dropped else ()
    if not vals:
        return Summary(math.nan, math.nan, 0, flags + ("empty",))
    n = len(vals)
    mean = math.fsum(vals) / n
    if n == 1:
        return Summary(mean, 0.0, 1, flags + ("n=1",))
    var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
    return Summary(mean, math.sqrt(var), n, flags)


def aggregate(reports, metrics=METRICS):
    """``{metric: Summary}`` over a list of reports, independent of list order."""
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    ordered = sorted(reports, key=lambda r: (r.case_id, r.structure))
    return {m: summarize([getattr(r, m) for r in ordered]) for m in metrics}


# --------------------------------------------------------------------------
# paired t-test


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p_two_sided: float


def _betacf(a, b, x, max_iter=300, eps=3e-16):
    # Continued fraction for the incomplete beta, modified Lentz method.
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a, b, x):
    """Regularised incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    bt = math.exp(lbt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t, df):
    """Two-sided tail probability P(|T| >= |t|) for Student's t with ``df``."""
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D and equally long: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = math.fsum(d) / n
    var = math.fsum((v - mean) ** 2 for v in d) / (n - 1)
    # A constant shift computed in floating point leaves rounding-level spread.
    scale = max(float(np.abs(a).max()), float(np.abs(b).max()), 1e-300)
    if math.sqrt(var) <= 64 * np.finfo(float).eps * scale:
        raise UndefinedMetricError("differences have zero variance; t is undefined")
    t = mean / math.sqrt(var / n)
    return TTestResult(t, n - 1, min(1.0, student_t_sf2(t, n - 1)))
