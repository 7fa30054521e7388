"""Layer primitives with exact backward passes.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. Arrays are float64 NCHW.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv2d_forward(x, w, b=None):
    """Stride-1 convolution with 'same' zero padding (odd square kernels)."""
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ValueError(f"conv shape mismatch: input {x.shape}, kernel {w.shape}")
    p = k // 2
    if k == 1:
        cols = x.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    out = cols @ w.reshape(o, -1).T
    if b is not None:
        out += b.reshape(1, o)
    out = out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, w, b is not None)


def conv2d_backward(dout, cache):
    xshape, cols, w, has_bias = cache
    n, c, h, wd = xshape
    o, _, k, _ = w.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0).reshape(1, o, 1, 1) if has_bias else None
    if k == 1:
        dx = (dmat @ w.reshape(o, c)).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), dw, db
    # Stride-1 'same' conv: the input gradient is the same-padded convolution
    # of dout with the spatially flipped, channel-transposed kernel.
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv2d_forward(dout, w_t)
    return dx, dw, db


def upconv2x2_forward(x, w, b):
    """Transposed convolution, kernel 2, stride 2. ``w`` is (c_in, c_out, 2, 2)."""
    n, c, h, wd = x.shape
    ci, o, kh, kw = w.shape
    if ci != c or (kh, kw) != (2, 2):
        raise ValueError(f"up-conv shape mismatch: input {x.shape}, kernel {w.shape}")
    xm = x.transpose(0, 2, 3, 1).reshape(-1, c)
    y = (xm @ w.reshape(c, o * 4)).reshape(n, h, wd, o, 2, 2)
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd)
    y = y + b.reshape(1, o, 1, 1)
    return y, (xm, x.shape, w)


def upconv2x2_backward(dout, cache):
    xm, (n, c, h, wd), w = cache
    o = w.shape[1]
    dm = dout.reshape(n, o, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, o * 4)
    dw = (xm.T @ dm).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
    dx = (dm @ w.reshape(c, o * 4).T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx), dw, db


def upsample_nearest_forward(x):
    return x.repeat(2, axis=2).repeat(2, axis=3), x.shape


def upsample_nearest_backward(dout, xshape):
    n, c, h, w = xshape
    return dout.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, momentum ``BN_MOMENTUM``).
    """
    if train:
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        m = x.size // x.shape[1]
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * (m / max(m - 1, 1))
    else:
        xc = x - running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def batchnorm_backward(dout, cache):
    """Backward through training-mode batch norm."""
    xhat, inv_std, gamma = cache
    m = dout.size // dout.shape[1]
    dbeta = dout.sum(axis=(0, 2, 3), keepdims=True)
    dgamma = (dout * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dxhat = dout * gamma
    dx = (inv_std / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    # Subgradient at 0 is taken as 0.
    return dout * mask


def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max-pool needs even spatial dims, got {(h, w)}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool2x2_backward(dout, cache):
    arg, (n, c, h, w) = cache
    blocks = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    dx = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(n, c, h, w)


def softmax_cross_entropy(logits, labels):
    """Mean pixelwise cross-entropy and its gradient with respect to the logits.

    ``labels`` is an (n, h, w) integer array with values in [0, n_classes).
    """
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    idx = labels[:, None].astype(np.intp)
    picked = np.take_along_axis(logp, idx, axis=1)
    count = n * h * w
    loss = -picked.sum() / count
    grad = np.exp(logp)
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
    return float(loss), grad / count
