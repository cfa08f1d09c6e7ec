"""Convolution kernels: numba loops and a numpy (im2col/tensordot) fallback.

Both paths compute zero-padded cross-correlation.  The public functions
dispatch on :data:`slseg._accel.USE_NUMBA`; the underlying implementations are
also exported so the benchmark and tests can compare them directly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit


def pad_input(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------- numba


# im2col / col2im are explicit loops; the contractions go through np.dot,
# which numba lowers to BLAS gemm.


@njit
def _im2col(xp, n, kh, kw, stride, Ho, Wo):
    C = xp.shape[1]
    cols = np.empty((C * kh * kw, Ho * Wo), dtype=xp.dtype)
    r = 0
    for c in range(C):
        for u in range(kh):
            for v in range(kw):
                for i in range(Ho):
                    row = xp[n, c, i * stride + u]
                    base = i * Wo
                    for j in range(Wo):
                        cols[r, base + j] = row[j * stride + v]
                r += 1
    return cols


@njit
def _col2im_add(cols, dxp, n, kh, kw, stride, Ho, Wo):
    C = dxp.shape[1]
    r = 0
    for c in range(C):
        for u in range(kh):
            for v in range(kw):
                for i in range(Ho):
                    dst = dxp[n, c, i * stride + u]
                    base = i * Wo
                    for j in range(Wo):
                        dst[j * stride + v] += cols[r, base + j]
                r += 1


@njit
def _conv_fwd_loops(xp, w, b, stride, Ho, Wo):
    N = xp.shape[0]
    K, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    w2 = w.reshape(K, -1)
    out = np.empty((N, K, Ho * Wo), dtype=xp.dtype)
    for n in range(N):
        out[n] = np.dot(w2, _im2col(xp, n, kh, kw, stride, Ho, Wo))
        for k in range(K):
            out[n, k] += b[k]
    return out.reshape(N, K, Ho, Wo)


@njit
def _conv_bwd_loops(g, xp, w, stride):
    N, K, Ho, Wo = g.shape
    kh, kw = w.shape[2], w.shape[3]
    w2 = w.reshape(K, -1)
    w2t = np.ascontiguousarray(w2.T)
    dxp = np.zeros_like(xp)
    dw = np.zeros((K, w2.shape[1]), dtype=g.dtype)
    db = np.zeros(K, dtype=g.dtype)
    for n in range(N):
        g2 = np.ascontiguousarray(g[n].reshape(K, Ho * Wo))
        cols = _im2col(xp, n, kh, kw, stride, Ho, Wo)
        dw += np.dot(g2, cols.T)
        _col2im_add(np.dot(w2t, g2), dxp, n, kh, kw, stride, Ho, Wo)
        for k in range(K):
            db[k] += g2[k].sum()
    return dxp, dw.reshape(w.shape), db


def _common(*arrays):
    dt = np.result_type(*arrays)
    return [np.ascontiguousarray(a, dtype=dt) for a in arrays]


def conv2d_forward_numba(x, w, b, stride, pad):
    x, w, b = _common(x, w, b)   # np.dot in nopython mode needs one dtype
    xp = pad_input(x, pad)
    Ho = out_size(x.shape[2], w.shape[2], stride, pad)
    Wo = out_size(x.shape[3], w.shape[3], stride, pad)
    return _conv_fwd_loops(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), stride, Ho, Wo)


def conv2d_backward_numba(g, x, w, stride, pad):
    """Return ``(dx, dw, db)`` for upstream gradient ``g``."""
    g, x, w = _common(g, x, w)
    xp = pad_input(x, pad)
    dxp, dw, db = _conv_bwd_loops(np.ascontiguousarray(g), xp, np.ascontiguousarray(w), stride)
    H, W = x.shape[2], x.shape[3]
    return dxp[:, :, pad:pad + H, pad:pad + W].copy(), dw, db


# --------------------------------------------------------------------- numpy


def _windows(xp, kh, kw, stride):
    # [N, C, Ho, Wo, kh, kw] view
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward_numpy(x, w, b, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(pad_input(x, pad), kh, kw, stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, K]
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward_numpy(g, x, w, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    xp = pad_input(x, pad)
    win = _windows(xp, kh, kw, stride)
    Ho, Wo = g.shape[2], g.shape[3]
    dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    db = g.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            contrib = np.tensordot(g, w[:, :, u, v], axes=([1], [0]))  # [N, Ho, Wo, C]
            dxp[:, :, u:u + stride * (Ho - 1) + 1:stride, v:v + stride * (Wo - 1) + 1:stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    H, W = x.shape[2], x.shape[3]
    return dxp[:, :, pad:pad + H, pad:pad + W].copy(), dw, db


if USE_NUMBA:
    conv2d_forward = conv2d_forward_numba
    conv2d_backward = conv2d_backward_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward = conv2d_backward_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
