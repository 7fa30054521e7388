"""Independent reference implementations used by the tests."""

import math
from fractions import Fraction

import numpy as np

from lungseg.tinynet import backward, forward, init_store, softmax_cross_entropy


def oracle_surface(mask, spacing):
    pts = []
    nz, ny, nx = mask.shape
    for z, y, x in np.argwhere(mask):
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = z + dz, y + dy, x + dx
            if not (0 <= a < nz and 0 <= b < ny and 0 <= c < nx) or not mask[a, b, c]:
                pts.append((z * spacing[0], y * spacing[1], x * spacing[2]))
                break
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def oracle_directed(src, dst, chunk=512):
    """All-pairs nearest distances, computed in row chunks."""
    out = np.empty(len(src))
    for s in range(0, len(src), chunk):
        d = np.sqrt(((src[s:s + chunk, None, :] - dst[None, :, :]) ** 2).sum(axis=-1))
        out[s:s + chunk] = d.min(axis=1)
    return out


def oracle_percentile(values, q):
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def oracle_hd95(x, y, spacing):
    xs, ys = oracle_surface(x, spacing), oracle_surface(y, spacing)
    return max(oracle_percentile(oracle_directed(xs, ys), 95),
               oracle_percentile(oracle_directed(ys, xs), 95))


def oracle_msd(x, y, spacing):
    xs, ys = oracle_surface(x, spacing), oracle_surface(y, spacing)
    return max(oracle_directed(xs, ys).mean(), oracle_directed(ys, xs).mean())


def oracle_dice(x, y):
    a, b = int(x.sum()), int(y.sum())
    if a + b == 0:
        return Fraction(1)
    return Fraction(2 * int((x & y).sum()), a + b)


H = 1e-5


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else np.linalg.norm(a - b) / scale


def numeric_grad(f, x, h=H):
    """Central differences of the scalar function ``f`` with respect to ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def net_loss(cfg, store, x, labels):
    logits, _ = forward(cfg, store, x, mode="train")
    return softmax_cross_entropy(logits, labels)[0]


def check_net_gradients(cfg, seed):
    """Worst per-tensor relative error of backward() against central differences."""
    rng = np.random.default_rng(seed)
    store = init_store(cfg, rng)
    for k in store.params():
        if k.endswith((".gamma", ".beta", ".b")):
            store[k] = store[k] + rng.normal(0, 0.3, store[k].shape)
    x = rng.normal(size=(1, 1, 8, 8))
    labels = rng.integers(0, 3, (1, 8, 8))
    logits, cache = forward(cfg, store, x, mode="train")
    _, dlogits = softmax_cross_entropy(logits, labels)
    grads = backward(cfg, store, cache, dlogits)
    assert list(grads) == store.params()
    worst = 0.0
    for name in store.params():
        num = numeric_grad(lambda: net_loss(cfg, store, x, labels), store[name])
        worst = max(worst, rel_err(grads[name], num))
    return worst


def layer_gradient_errors(seed):
    """Relative errors of every layer's backward pass on random inputs; one entry per layer."""
    from lungseg.tinynet import layers as L

    rng = np.random.default_rng(seed)
    errs = {}

    def check(name, fwd, bwd, inputs, out_shape):
        r = rng.normal(size=out_shape)

        def f():
            return float((fwd(*inputs) * r).sum())

        worst = 0.0
        for analytic, var in zip(bwd(r), inputs):
            if analytic is not None:
                worst = max(worst, rel_err(analytic, numeric_grad(f, var)))
        errs[name] = worst

    x = rng.normal(size=(2, 3, 6, 6))
    w, b = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=(1, 4, 1, 1))
    check("conv3x3", lambda x, w, b: L.conv2d_forward(x, w, b)[0],
          lambda r: L.conv2d_backward(r, L.conv2d_forward(x, w, b)[1]), (x, w, b), (2, 4, 6, 6))

    g, be = rng.normal(size=(1, 3, 1, 1)), rng.normal(size=(1, 3, 1, 1))

    def bn(x, g, be):
        return L.batchnorm_forward(x, g, be, np.zeros((1, 3, 1, 1)), np.ones((1, 3, 1, 1)), True)

    check("batchnorm", lambda x, g, be: bn(x, g, be)[0],
          lambda r: L.batchnorm_backward(r, bn(x, g, be)[1]), (x, g, be), x.shape)

    xr = rng.normal(size=(2, 3, 6, 6))
    xr[np.abs(xr) < 1e-3] = 0.5  # keep central differences off the kink
    check("relu", lambda x: L.relu_forward(x)[0],
          lambda r: (L.relu_backward(r, L.relu_forward(xr)[1]),), (xr,), xr.shape)

    check("maxpool2x2", lambda x: L.maxpool2x2_forward(x)[0],
          lambda r: (L.maxpool2x2_backward(r, L.maxpool2x2_forward(x)[1]),), (x,), (2, 3, 3, 3))

    wu, bu = rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(1, 2, 1, 1))
    check("upconv2x2", lambda x, w, b: L.upconv2x2_forward(x, w, b)[0],
          lambda r: L.upconv2x2_backward(r, L.upconv2x2_forward(x, wu, bu)[1]), (x, wu, bu), (2, 2, 12, 12))

    # skip concatenation and residual addition: gradients split and copy
    y = rng.normal(size=(2, 2, 6, 6))
    check("concat", lambda x, y: np.concatenate([x, y], axis=1),
          lambda r: (r[:, :3], r[:, 3:]), (x, y), (2, 5, 6, 6))
    z = rng.normal(size=x.shape)
    check("residual_add", lambda x, z: x + z, lambda r: (r, r), (x, z), x.shape)
    return errs
