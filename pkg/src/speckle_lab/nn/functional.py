"""Forward/backward kernels on NCHW numpy arrays.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(xp, (b, c, ho, wo, k, k), (sb, sc, sh * stride, sw * stride, sh, sw), writeable=False)


def _scatter(canvas: np.ndarray, cols: np.ndarray, stride: int, h: int, w: int) -> None:
    # cols: (B, C, h, w, k, k); accumulate each kernel tap into its strided slot
    k = cols.shape[-1]
    for i in range(k):
        for j in range(k):
            canvas[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += cols[..., i, j]


def conv2d_forward(x, w, b, stride=1, padding=0):
    bsz, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _windows(xp, k, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * k * k)
    out = cols @ w.reshape(o, -1).T + b
    out = out.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, w, stride, padding)


def conv2d_backward(dout, cache, need_dx=True):
    x_shape, cols, w, stride, padding = cache
    bsz, c, h, wd = x_shape
    o, _, k, _ = w.shape
    ho, wo = dout.shape[2:]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dcols = (dmat @ w.reshape(o, -1)).reshape(bsz, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((bsz, c, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
        _scatter(dxp, dcols, stride, ho, wo)
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    return dx, dw, db


def conv_transpose2d_forward(x, w, b, stride=1, padding=0, output_padding=0):
    """``w`` has shape (C_in, C_out, k, k); this is the adjoint of conv2d in x."""
    bsz, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    xmat = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    cols = (xmat @ w.reshape(cin, -1)).reshape(bsz, h, wd, cout, k, k).transpose(0, 3, 1, 2, 4, 5)
    canvas = np.zeros((bsz, cout, (h - 1) * stride + k + output_padding, (wd - 1) * stride + k + output_padding),
                      dtype=x.dtype)
    _scatter(canvas, cols, stride, h, wd)
    out = canvas[:, :, padding:padding + ho, padding:padding + wo] + b[None, :, None, None]
    return np.ascontiguousarray(out), (xmat, x.shape, w, stride, padding, output_padding)


def conv_transpose2d_backward(dout, cache, need_dx=True):
    xmat, x_shape, w, stride, padding, output_padding = cache
    bsz, cin, h, wd = x_shape
    _, cout, k, _ = w.shape
    ho, wo = dout.shape[2:]
    canvas = np.zeros((bsz, cout, (h - 1) * stride + k + output_padding, (wd - 1) * stride + k + output_padding),
                      dtype=dout.dtype)
    canvas[:, :, padding:padding + ho, padding:padding + wo] = dout
    dcols = _windows(canvas, k, stride, h, wd).transpose(0, 2, 3, 1, 4, 5).reshape(bsz * h * wd, cout * k * k)
    dw = (xmat.T @ dcols).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dx = (dcols @ w.reshape(cin, -1).T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2)
        dx = np.ascontiguousarray(dx)
    return dx, dw, db


def batch_norm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.9, eps=1e-5):
    """Spatial batch norm over (N, H, W) per channel.

    In train mode the running buffers are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    shape = (1, -1, 1, 1)
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * x_hat + beta.reshape(shape)
    return out, (x_hat, inv_std, gamma, train)


def batch_norm_backward(dout, cache, need_dx=True):
    x_hat, inv_std, gamma, train = cache
    dgamma = (dout * x_hat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        shape = (1, -1, 1, 1)
        g = gamma.reshape(shape) * inv_std.reshape(shape)
        if train:
            m = dout.shape[0] * dout.shape[2] * dout.shape[3]
            dx = g * (dout - dbeta.reshape(shape) / m - x_hat * dgamma.reshape(shape) / m)
        else:
            dx = g * dout
    return dx, dgamma, dbeta


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dout, x, w, need_dx=True):
    dw = x.T @ dout
    db = dout.sum(axis=0)
    dx = dout @ w.T if need_dx else None
    return dx, dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def sigmoid_forward(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(dout, out):
    return dout * out * (1.0 - out)
