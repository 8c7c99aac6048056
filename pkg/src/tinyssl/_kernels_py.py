"""Pure numpy convolution kernels.

Reference implementations of the hot loops. The compiled module
``tinyssl._ckernels`` exposes the same five functions with the same
signatures; ``tinyssl.kernels`` picks one at import time.
"""
import numpy as np


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    """(B, C, H, W) -> (B, C*k*k, Ho*Wo) patch matrix."""
    B, C, H, W = x.shape
    Ho, Wo = out_size(H, k, stride, pad), out_size(W, k, stride, pad)
    xp = _pad(x, pad)
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=x.dtype)
    for p in range(k):
        for q in range(k):
            cols[:, :, p, q] = xp[:, :, p:p + stride * Ho:stride, q:q + stride * Wo:stride]
    return cols.reshape(B, C * k * k, Ho * Wo)


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back to (B, C, H, W)."""
    B, C, H, W = shape
    Ho, Wo = out_size(H, k, stride, pad), out_size(W, k, stride, pad)
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for p in range(k):
        for q in range(k):
            xp[:, :, p:p + stride * Ho:stride, q:q + stride * Wo:stride] += cols[:, :, p, q]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:-pad, pad:-pad])
    return xp


def depthwise_forward(x, w, stride, pad):
    """x (B, C, H, W), w (C, k, k) -> (B, C, Ho, Wo)."""
    B, C, H, W = x.shape
    k = w.shape[-1]
    Ho, Wo = out_size(H, k, stride, pad), out_size(W, k, stride, pad)
    xp = _pad(x, pad)
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for p in range(k):
        for q in range(k):
            out += xp[:, :, p:p + stride * Ho:stride, q:q + stride * Wo:stride] * w[None, :, p, q, None, None]
    return out


def depthwise_backward(x, w, g, stride, pad):
    """Returns (dx, dw) for :func:`depthwise_forward` given upstream grad g."""
    B, C, H, W = x.shape
    k = w.shape[-1]
    Ho, Wo = g.shape[2], g.shape[3]
    xp = _pad(x, pad)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for p in range(k):
        for q in range(k):
            win = (slice(None), slice(None), slice(p, p + stride * Ho, stride), slice(q, q + stride * Wo, stride))
            dxp[win] += g * w[None, :, p, q, None, None]
            dw[:, p, q] = np.einsum("bchw,bchw->c", g, xp[win])
    if pad:
        dxp = np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp, dw
