"""TNET1 weight files.

ASCII header ``TNET1``, one ``tensor <name> d0 d1 d2 d3`` line per tensor, a
blank line, then each tensor as raw little-endian float64 in header order.
"""

import numpy as np

from .net import ShapeMismatchError, TensorStore, check_store

MAGIC = "TNET1"


class WeightsFormatError(ValueError):
    pass


def save_weights(store, path):
    lines = [MAGIC]
    for name, arr in store.items():
        if arr.ndim != 4:
            raise ShapeMismatchError(f"{name}: only 4-D tensors are storable, got {arr.shape}")
        if any(c.isspace() for c in name):
            raise WeightsFormatError(f"tensor name {name!r} contains whitespace")
        lines.append("tensor " + name + " " + " ".join(str(d) for d in arr.shape))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("ascii"))
        for arr in store.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path, cfg=None):
    """Read a weight file; when ``cfg`` is given, names and shapes must match it."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise WeightsFormatError(f"{path}: header not terminated")
    lines = blob[:sep].decode("ascii", "replace").split("\n")
    if lines[0] != MAGIC:
        raise WeightsFormatError(f"{path}: not a {MAGIC} file")
    specs = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 6 or parts[0] != "tensor":
            raise WeightsFormatError(f"{path}: bad header line {ln!r}")
        try:
            shape = tuple(int(p) for p in parts[2:])
        except ValueError as exc:
            raise WeightsFormatError(f"{path}: bad shape in {ln!r}") from exc
        specs.append((parts[1], shape))
    offset = sep + 2
    store = TensorStore()
    for name, shape in specs:
        if name in store:
            raise WeightsFormatError(f"{path}: duplicate tensor {name!r}")
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise WeightsFormatError(f"{path}: truncated at tensor {name!r}")
        store[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise WeightsFormatError(f"{path}: {len(blob) - offset} trailing bytes")
    if cfg is not None:
        check_store(cfg, store)
    return store
