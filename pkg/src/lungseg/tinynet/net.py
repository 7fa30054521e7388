"""U-net and residual U-net built on the layer primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L

VELOCITY_PREFIX = "velocity."
META_PREFIX = "meta."
_BUFFER_SUFFIXES = (".running_mean", ".running_var")


class ShapeMismatchError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    depth: int = 3
    base_channels: int = 8
    residual: bool = False
    in_channels: int = 1
    out_channels: int = 3
    upsample: str = "transpose"

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")
        if self.upsample not in ("transpose", "nearest"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")

    def channels(self, level):
        return self.base_channels * 2 ** level


class TensorStore(dict):
    """Ordered name -> 4-D float64 array map.

    ``generation`` is bumped by every optimiser step so that a forward cache
    taken before the step can be recognised as stale.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.generation = 0

    def params(self):
        return [k for k in self if is_trainable(k)]

    def copy(self):
        out = TensorStore((k, v.copy()) for k, v in self.items())
        out.generation = self.generation
        return out


def is_trainable(name):
    return not name.startswith((VELOCITY_PREFIX, META_PREFIX)) and not name.endswith(
        _BUFFER_SUFFIXES
    )


def _block_shapes(prefix, cin, cout, residual):
    shapes = {
        f"{prefix}.conv1.w": (cout, cin, 3, 3),
        f"{prefix}.bn1.gamma": (1, cout, 1, 1),
        f"{prefix}.bn1.beta": (1, cout, 1, 1),
        f"{prefix}.bn1.running_mean": (1, cout, 1, 1),
        f"{prefix}.bn1.running_var": (1, cout, 1, 1),
        f"{prefix}.conv2.w": (cout, cout, 3, 3),
        f"{prefix}.bn2.gamma": (1, cout, 1, 1),
        f"{prefix}.bn2.beta": (1, cout, 1, 1),
        f"{prefix}.bn2.running_mean": (1, cout, 1, 1),
        f"{prefix}.bn2.running_var": (1, cout, 1, 1),
    }
    if residual:
        shapes[f"{prefix}.proj.w"] = (cout, cin, 1, 1)
    return shapes


def param_shapes(cfg):
    """Names and shapes of every tensor a config needs, in canonical order."""
    shapes = {}
    cin = cfg.in_channels
    for i in range(cfg.depth):
        shapes.update(_block_shapes(f"enc{i}", cin, cfg.channels(i), cfg.residual))
        cin = cfg.channels(i)
    shapes.update(_block_shapes("mid", cin, cfg.channels(cfg.depth), cfg.residual))
    for i in reversed(range(cfg.depth)):
        hi, lo = cfg.channels(i + 1), cfg.channels(i)
        if cfg.upsample == "transpose":
            shapes[f"up{i}.w"] = (hi, lo, 2, 2)
        else:
            shapes[f"up{i}.w"] = (lo, hi, 3, 3)
        shapes[f"up{i}.b"] = (1, lo, 1, 1)
        shapes.update(_block_shapes(f"dec{i}", 2 * lo, lo, cfg.residual))
    shapes["head.w"] = (cfg.out_channels, cfg.channels(0), 1, 1)
    shapes["head.b"] = (1, cfg.out_channels, 1, 1)
    return shapes


def init_store(cfg, rng):
    """He-normal conv weights, zero biases, unit BN scale; zero momentum buffers."""
    store = TensorStore()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".w"):
            if name.startswith("up") and cfg.upsample == "transpose":
                fan_in = shape[0]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            store[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith((".gamma", ".running_var")):
            store[name] = np.ones(shape)
        else:
            store[name] = np.zeros(shape)
    for name in list(store):
        if is_trainable(name):
            store[VELOCITY_PREFIX + name] = np.zeros_like(store[name])
    return store


def check_store(cfg, store):
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in store:
            raise ShapeMismatchError(f"missing tensor {name!r} for {cfg}")
        if tuple(store[name].shape) != shape:
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {store[name].shape}, config needs {shape}"
            )
    for name in store:
        if name.startswith(META_PREFIX):
            continue
        base = name[len(VELOCITY_PREFIX):] if name.startswith(VELOCITY_PREFIX) else name
        if base not in expected:
            raise ShapeMismatchError(f"unexpected tensor {name!r} for {cfg}")


def infer_config(store):
    """Recover the NetConfig that produced a store from its tensor names and shapes."""
    depth = sum(1 for k in store if k.startswith("enc") and k.endswith(".conv1.w"))
    if depth < 1 or "enc0.conv1.w" not in store or "head.w" not in store:
        raise ShapeMismatchError("store does not look like a U-net")
    enc0 = store["enc0.conv1.w"].shape
    cfg = NetConfig(
        depth=depth,
        base_channels=enc0[0],
        residual="enc0.proj.w" in store,
        in_channels=enc0[1],
        out_channels=store["head.w"].shape[0],
        upsample="nearest" if store["up0.w"].shape[2] == 3 else "transpose",
    )
    check_store(cfg, store)
    return cfg


# --------------------------------------------------------------------------
# forward / backward


def _bn(store, prefix, x, train):
    return L.batchnorm_forward(
        x,
        store[prefix + ".gamma"],
        store[prefix + ".beta"],
        store[prefix + ".running_mean"],
        store[prefix + ".running_var"],
        train,
    )


def _block_forward(store, prefix, x, train, residual):
    h, c1 = L.conv2d_forward(x, store[prefix + ".conv1.w"])
    h, b1 = _bn(store, prefix + ".bn1", h, train)
    h, r1 = L.relu_forward(h)
    h, c2 = L.conv2d_forward(h, store[prefix + ".conv2.w"])
    h, b2 = _bn(store, prefix + ".bn2", h, train)
    cp = None
    if residual:
        skip, cp = L.conv2d_forward(x, store[prefix + ".proj.w"])
        h = h + skip
    h, r2 = L.relu_forward(h)
    return h, (c1, b1, r1, c2, b2, cp, r2)


def _block_backward(prefix, dy, cache, grads):
    c1, b1, r1, c2, b2, cp, r2 = cache
    dh = L.relu_backward(dy, r2)
    dx = 0.0
    if cp is not None:
        dx, grads[prefix + ".proj.w"], _ = L.conv2d_backward(dh, cp)
    dh, grads[prefix + ".bn2.gamma"], grads[prefix + ".bn2.beta"] = L.batchnorm_backward(dh, b2)
    dh, grads[prefix + ".conv2.w"], _ = L.conv2d_backward(dh, c2)
    dh = L.relu_backward(dh, r1)
    dh, grads[prefix + ".bn1.gamma"], grads[prefix + ".bn1.beta"] = L.batchnorm_backward(dh, b1)
    dh, grads[prefix + ".conv1.w"], _ = L.conv2d_backward(dh, c1)
    return dh + dx


def _up_forward(cfg, store, i, x):
    w, b = store[f"up{i}.w"], store[f"up{i}.b"]
    if cfg.upsample == "transpose":
        y, c = L.upconv2x2_forward(x, w, b)
        return y, ("t", c)
    u, cu = L.upsample_nearest_forward(x)
    y, cc = L.conv2d_forward(u, w, b)
    return y, ("n", cu, cc)


def _up_backward(i, dy, cache, grads):
    if cache[0] == "t":
        dx, grads[f"up{i}.w"], grads[f"up{i}.b"] = L.upconv2x2_backward(dy, cache[1])
        return dx
    du, grads[f"up{i}.w"], grads[f"up{i}.b"] = L.conv2d_backward(dy, cache[2])
    return L.upsample_nearest_backward(du, cache[1])


class ForwardCache:
    def __init__(self, cfg, store, train, records):
        self.cfg = cfg
        self.store_id = id(store)
        self.generation = store.generation
        self.train = train
        self.records = records


def forward(cfg, store, batch, mode="eval"):
    """Run the network on an (n, in_channels, h, w) batch.

    Returns ``(logits, cache)``; logits have shape (n, out_channels, h, w).
    Training mode normalises with batch statistics and updates the running
    batch-norm buffers in ``store``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeMismatchError(f"batch shape {x.shape} does not fit {cfg}")
    step = 2 ** cfg.depth
    if x.shape[2] % step or x.shape[3] % step:
        raise ShapeMismatchError(f"spatial dims {x.shape[2:]} not divisible by {step}")
    train = mode == "train"
    res = cfg.residual

    skips, enc, pools = [], [], []
    h = x
    for i in range(cfg.depth):
        h, c = _block_forward(store, f"enc{i}", h, train, res)
        enc.append(c)
        skips.append(h)
        h, p = L.maxpool2x2_forward(h)
        pools.append(p)
    h, mid = _block_forward(store, "mid", h, train, res)
    ups, decs = [], []
    for i in reversed(range(cfg.depth)):
        h, u = _up_forward(cfg, store, i, h)
        ups.append(u)
        h = np.concatenate([skips[i], h], axis=1)
        h, d = _block_forward(store, f"dec{i}", h, train, res)
        decs.append(d)
    logits, head = L.conv2d_forward(h, store["head.w"], store["head.b"])
    records = (enc, pools, mid, ups, decs, head)
    return logits, ForwardCache(cfg, store, train, records)


def backward(cfg, store, cache, grad_logits):
    """Gradients of every trainable tensor, given d(loss)/d(logits).

    Does not modify ``store``.
    """
    if not isinstance(cache, ForwardCache):
        raise StaleCacheError("backward needs the cache returned by forward")
    if cache.cfg != cfg or cache.store_id != id(store):
        raise StaleCacheError("cache was produced by a different config or store")
    if cache.generation != store.generation:
        raise StaleCacheError("store was updated after the forward pass")
    if not cache.train:
        raise StaleCacheError("backward requires a training-mode forward pass")
    enc, pools, mid, ups, decs, head = cache.records
    grads = TensorStore()
    dh, grads["head.w"], grads["head.b"] = L.conv2d_backward(grad_logits, head)
    dskips = [None] * cfg.depth
    for i in range(cfg.depth):
        j = cfg.depth - 1 - i  # decoder records were stored deepest first
        dh = _block_backward(f"dec{i}", dh, decs[j], grads)
        c = cfg.channels(i)
        dskips[i] = dh[:, :c]
        dh = _up_backward(i, np.ascontiguousarray(dh[:, c:]), ups[j], grads)
    dh = _block_backward("mid", dh, mid, grads)
    for i in reversed(range(cfg.depth)):
        dh = L.maxpool2x2_backward(dh, pools[i]) + dskips[i]
        dh = _block_backward(f"enc{i}", dh, enc[i], grads)
    # canonical order
    return TensorStore((k, grads[k]) for k in param_shapes(cfg) if is_trainable(k))


def predict(cfg, store, batch, chunk=32):
    """Eval-mode argmax labels for an (n, 1, h, w) batch."""
    out = []
    for s in range(0, len(batch), chunk):
        logits, _ = forward(cfg, store, batch[s:s + chunk], mode="eval")
        out.append(logits.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out, axis=0)
