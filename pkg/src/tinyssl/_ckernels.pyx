# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels; drop-in twin of ``tinyssl._kernels_py``."""
import numpy as np

from cython cimport floating




def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


cdef void _im2col(floating[:, :, :, ::1] x, floating[:, :, ::1] cols,
                  int k, int stride, int pad, int Ho, int Wo) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, p, q, i, j, row, ii, jj
    for b in range(B):
        for c in range(C):
            for p in range(k):
                for q in range(k):
                    row = (c * k + p) * k + q
                    for i in range(Ho):
                        ii = i * stride + p - pad
                        for j in range(Wo):
                            jj = j * stride + q - pad
                            if ii < 0 or ii >= H or jj < 0 or jj >= W:
                                cols[b, row, i * Wo + j] = 0
                            else:
                                cols[b, row, i * Wo + j] = x[b, c, ii, jj]


def im2col(x, int k, int stride, int pad):
    x = np.ascontiguousarray(x)
    B, C, H, W = x.shape
    Ho, Wo = out_size(H, k, stride, pad), out_size(W, k, stride, pad)
    cols = np.empty((B, C * k * k, Ho * Wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, k, stride, pad, Ho, Wo)
    else:
        _im2col[double](x, cols, k, stride, pad, Ho, Wo)
    return cols


cdef void _col2im(floating[:, :, ::1] cols, floating[:, :, :, ::1] x,
                  int k, int stride, int pad, int Ho, int Wo) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, p, q, i, j, row, ii, jj
    for b in range(B):
        for c in range(C):
            for p in range(k):
                for q in range(k):
                    row = (c * k + p) * k + q
                    for i in range(Ho):
                        ii = i * stride + p - pad
                        if ii < 0 or ii >= H:
                            continue
                        for j in range(Wo):
                            jj = j * stride + q - pad
                            if jj >= 0 and jj < W:
                                x[b, c, ii, jj] += cols[b, row, i * Wo + j]


def col2im(cols, shape, int k, int stride, int pad):
    B, C, H, W = shape
    Ho, Wo = out_size(H, k, stride, pad), out_size(W, k, stride, pad)
    cols = np.ascontiguousarray(cols).reshape(B, C * k * k, Ho * Wo)
    x = np.zeros((B, C, H, W), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, x, k, stride, pad, Ho, Wo)
    else:
        _col2im[double](cols, x, k, stride, pad, Ho, Wo)
    return x


cdef void _dw_forward(floating[:, :, :, ::1] x, floating[:, :, ::1] w, floating[:, :, :, ::1] out,
                      int stride, int pad) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t k = w.shape[2], Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t b, c, p, q, i, j, ii, jj
    cdef floating acc
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0
                    for p in range(k):
                        ii = i * stride + p - pad
                        if ii < 0 or ii >= H:
                            continue
                        for q in range(k):
                            jj = j * stride + q - pad
                            if jj >= 0 and jj < W:
                                acc = acc + x[b, c, ii, jj] * w[c, p, q]
                    out[b, c, i, j] = acc


def depthwise_forward(x, w, int stride, int pad):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    B, C, H, W = x.shape
    k = w.shape[2]
    out = np.empty((B, C, out_size(H, k, stride, pad), out_size(W, k, stride, pad)), dtype=x.dtype)
    if x.dtype == np.float32:
        _dw_forward[float](x, w, out, stride, pad)
    else:
        _dw_forward[double](x, w, out, stride, pad)
    return out


cdef void _dw_backward(floating[:, :, :, ::1] x, floating[:, :, ::1] w, floating[:, :, :, ::1] g,
                       floating[:, :, :, ::1] dx, floating[:, :, ::1] dw,
                       int stride, int pad) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t k = w.shape[2], Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t b, c, p, q, i, j, ii, jj
    cdef floating gv
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    gv = g[b, c, i, j]
                    for p in range(k):
                        ii = i * stride + p - pad
                        if ii < 0 or ii >= H:
                            continue
                        for q in range(k):
                            jj = j * stride + q - pad
                            if jj >= 0 and jj < W:
                                dx[b, c, ii, jj] += gv * w[c, p, q]
                                dw[c, p, q] += gv * x[b, c, ii, jj]


def depthwise_backward(x, w, g, int stride, int pad):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    g = np.ascontiguousarray(g)
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    if x.dtype == np.float32:
        _dw_backward[float](x, w, g, dx, dw, stride, pad)
    else:
        _dw_backward[double](x, w, g, dx, dw, stride, pad)
    return dx, dw
