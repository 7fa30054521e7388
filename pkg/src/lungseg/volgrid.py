"""Volume and label grids, the RVOL1 file format, plane resampling and manifests.

Arrays are stored z, y, x with x varying fastest, so the flat index of voxel
(z, y, x) is ``((z * ny) + y) * nx + x``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

LABEL_BACKGROUND = 0
LABEL_RIGHT = 1
LABEL_LEFT = 2
VALID_LABELS = (LABEL_BACKGROUND, LABEL_RIGHT, LABEL_LEFT)

MAGIC = "RVOL1"
_DTYPES = {"int16": np.dtype("<i2"), "uint8": np.dtype("u1")}


class FormatError(ValueError):
    """Base class for malformed RVOL1 files."""


class HeaderError(FormatError):
    pass


class DtypeMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class SpacingError(FormatError):
    pass


class InvariantError(ValueError):
    """A grid violates one of its construction invariants."""


class ManifestError(ValueError):
    pass


def _check_geometry(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise InvariantError(f"dims must be three counts >= 1, got {dims}")
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise SpacingError(f"spacing must be three positive values, got {spacing}")
    return dims, spacing


def _frozen(values, dtype, dims):
    arr = np.asarray(values)
    if arr.size != dims[0] * dims[1] * dims[2]:
        raise InvariantError(f"{arr.size} values do not fill dims {dims}")
    arr = np.array(arr.reshape(dims), dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume3:
    """CT image in Hounsfield units."""

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    dims: tuple = field(init=False)

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 3:
            raise InvariantError(f"expected a 3-D array, got shape {raw.shape}")
        if raw.size and (raw.min() < -32768 or raw.max() > 32767):
            raise InvariantError("HU values outside the int16 range")
        dims, spacing = _check_geometry(raw.shape, self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "values", _frozen(raw, np.int16, dims))

    def __eq__(self, other):
        if not isinstance(other, Volume3):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Voxel labels: 0 background, 1 right lung, 2 left lung."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    dims: tuple = field(init=False)

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 3:
            raise InvariantError(f"expected a 3-D array, got shape {raw.shape}")
        dims, spacing = _check_geometry(raw.shape, self.spacing)
        bad = np.setdiff1d(np.unique(raw), VALID_LABELS)
        if bad.size:
            raise InvariantError(f"labels outside {{0, 1, 2}}: {bad.tolist()}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "labels", _frozen(raw, np.uint8, dims))

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.labels, other.labels)

    def region(self, *labels):
        """Binary mask of the given labels (default: any lung)."""
        labels = labels or (LABEL_RIGHT, LABEL_LEFT)
        return np.isin(self.labels, labels)


# --------------------------------------------------------------------------
# RVOL1


def _fmt_float(x):
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def _header(dtype_name, dims, spacing):
    lines = [
        MAGIC,
        f"dtype {dtype_name}",
        "dims " + " ".join(str(d) for d in dims),
        "spacing " + " ".join(_fmt_float(s) for s in spacing),
        "data raw-le",
        "",
        "",
    ]
    return "\n".join(lines).encode("ascii")


def _read_rvol(path, expected_dtype):
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise HeaderError(f"{path}: header is not terminated by a blank line")
    try:
        lines = blob[:sep].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise HeaderError(f"{path}: header is not ASCII") from exc
    payload = blob[sep + 2:]

    if len(lines) != 5 or lines[0] != MAGIC:
        raise HeaderError(f"{path}: expected {MAGIC} header with 4 fields")
    keys = [ln.split(" ", 1)[0] for ln in lines[1:]]
    if keys != ["dtype", "dims", "spacing", "data"]:
        raise HeaderError(f"{path}: unexpected header fields {keys}")
    dtype_name = lines[1].split(" ", 1)[1]
    if dtype_name not in _DTYPES:
        raise HeaderError(f"{path}: unknown dtype {dtype_name!r}")
    if dtype_name != expected_dtype:
        raise DtypeMismatchError(f"{path}: stored dtype {dtype_name}, expected {expected_dtype}")
    if lines[4] != "data raw-le":
        raise HeaderError(f"{path}: unsupported data encoding {lines[4]!r}")
    try:
        dims = tuple(int(t) for t in lines[2].split()[1:])
        spacing = tuple(float(t) for t in lines[3].split()[1:])
    except ValueError as exc:
        raise HeaderError(f"{path}: unparsable dims/spacing") from exc
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise HeaderError(f"{path}: bad dims {dims}")
    if len(spacing) != 3:
        raise HeaderError(f"{path}: bad spacing {spacing}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise SpacingError(f"{path}: non-positive spacing {spacing}")

    dtype = _DTYPES[dtype_name]
    need = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, need {need}")
    if len(payload) > need:
        raise FormatError(f"{path}: {len(payload) - need} trailing bytes after payload")
    values = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return values, spacing


def _write_rvol(path, dtype_name, arr, spacing):
    data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
    with open(path, "wb") as fh:
        fh.write(_header(dtype_name, arr.shape, spacing))
        fh.write(data)


def load_volume(path):
    values, spacing = _read_rvol(path, "int16")
    return Volume3(values, spacing)


def save_volume(v, path):
    if not isinstance(v, Volume3):
        raise TypeError("save_volume expects a Volume3")
    _write_rvol(path, "int16", v.values, v.spacing)


def load_mask(path):
    values, spacing = _read_rvol(path, "uint8")
    return LabelVolume(values, spacing)


def save_mask(m, path):
    if not isinstance(m, LabelVolume):
        raise TypeError("save_mask expects a LabelVolume")
    # Re-check: the label invariant is what makes the file meaningful.
    bad = np.setdiff1d(np.unique(m.labels), VALID_LABELS)
    if bad.size:
        raise InvariantError(f"labels outside {{0, 1, 2}}: {bad.tolist()}")
    _write_rvol(path, "uint8", m.labels, m.spacing)


# --------------------------------------------------------------------------
# planes


def extract_slice(v, z):
    """Return the z-th xy plane of a volume (or label volume) as a 2-D array."""
    arr = v.values if isinstance(v, Volume3) else v.labels
    nz = arr.shape[0]
    if not 0 <= z < nz:
        raise IndexError(f"slice {z} outside [0, {nz})")
    return arr[z]


def _source_coords(n_in, n_out):
    # Half-pixel-centre alignment: output k samples input (k + 0.5) * in/out - 0.5.
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def _bilinear_axis(n_in, n_out):
    src = np.clip(_source_coords(n_in, n_out), 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _nearest_axis(n_in, n_out):
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
    return np.minimum(idx, n_in - 1)


def resample_plane(plane, out_y, out_x, mode="bilinear"):
    """Resize a 2-D plane to ``(out_y, out_x)``.

    ``bilinear`` returns float64 and is meant for intensities; ``nearest``
    keeps the input dtype and never invents values, so it is used for labels.
    """
    plane = np.asarray(plane)
    if plane.ndim != 2 or min(plane.shape) < 1:
        raise ValueError(f"expected a non-empty 2-D plane, got shape {plane.shape}")
    if out_y < 1 or out_x < 1:
        raise ValueError(f"output dims must be >= 1, got {(out_y, out_x)}")
    ny, nx = plane.shape
    if mode == "nearest":
        return plane[np.ix_(_nearest_axis(ny, out_y), _nearest_axis(nx, out_x))]
    if mode != "bilinear":
        raise ValueError(f"unknown resampling mode {mode!r}")
    y0, y1, wy = _bilinear_axis(ny, out_y)
    x0, x1, wx = _bilinear_axis(nx, out_x)
    p = plane.astype(np.float64)
    top = p[y0][:, x0] * (1 - wx) + p[y0][:, x1] * wx
    bot = p[y1][:, x0] * (1 - wx) + p[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


# --------------------------------------------------------------------------
# manifests


SPLITS = ("train", "test")
MANIFEST_COLUMNS = ["case_id", "image_path", "mask_path", "split", "tags"]


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    image_path: str
    mask_path: str
    split: str
    tags: tuple = ()

    def tag_value(self, key, default=None):
        """Look up a ``key=value`` tag."""
        prefix = key + "="
        for t in self.tags:
            if t.startswith(prefix):
                return t[len(prefix):]
        return default


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _check_file(path, dtype_name):
    with open(path, "rb") as fh:
        head = fh.read(256)
    sep = head.find(b"\n\n")
    if sep < 0:
        raise ManifestError(f"{path}: not an RVOL1 file")
    lines = head[:sep].decode("ascii", "replace").split("\n")
    if len(lines) != 5 or lines[0] != MAGIC or lines[1] != f"dtype {dtype_name}":
        raise ManifestError(f"{path}: not an RVOL1 {dtype_name} file")
    try:
        dims = [int(t) for t in lines[2].split()[1:]]
    except ValueError as exc:
        raise ManifestError(f"{path}: bad dims line") from exc
    need = sep + 2 + int(np.prod(dims)) * _DTYPES[dtype_name].itemsize
    if os.path.getsize(path) != need:
        raise ManifestError(f"{path}: payload size does not match header")


# Tags of the form ``<key>=<path>`` for these keys carry file paths.
PATH_TAGS = ("tumor_mask",)


def _resolve_tag(tag, base, relative=False):
    key, sep, value = tag.partition("=")
    if not sep or key not in PATH_TAGS:
        return tag
    value = os.path.relpath(value, base) if relative else os.path.join(base, value)
    return f"{key}={value}"


def load_manifest(path, check_files=True):
    """Read a manifest CSV; relative paths resolve against the manifest's folder."""
    base = os.path.dirname(os.path.abspath(path))
    entries, seen = [], set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: columns must be {','.join(MANIFEST_COLUMNS)}")
        for row in reader:
            cid = row["case_id"].strip()
            if not cid:
                raise ManifestError(f"{path}: empty case_id")
            if cid in seen:
                raise ManifestError(f"{path}: duplicate case_id {cid!r}")
            seen.add(cid)
            split = row["split"].strip()
            if split not in SPLITS:
                raise ManifestError(f"{path}: unknown split {split!r} for case {cid!r}")
            tags = tuple(
                _resolve_tag(t, base) for t in (row["tags"] or "").split(";") if t
            )
            image = os.path.join(base, row["image_path"])
            mask = os.path.join(base, row["mask_path"])
            if check_files:
                for p, dt in ((image, "int16"), (mask, "uint8")):
                    if not os.path.isfile(p):
                        raise ManifestError(f"{path}: missing file {p}")
                    _check_file(p, dt)
            entries.append(ManifestEntry(cid, image, mask, split, tags))
    if not entries:
        raise ManifestError(f"{path}: no entries")
    return DatasetManifest(tuple(entries))


def save_manifest(manifest, path):
    """Write a manifest, storing paths relative to the manifest's folder."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            w.writerow([
                e.case_id,
                os.path.relpath(e.image_path, base),
                os.path.relpath(e.mask_path, base),
                e.split,
                ";".join(_resolve_tag(t, base, relative=True) for t in e.tags),
            ])
