"""Pure-numpy fallback for the compiled convolution kernels.

Signatures mirror ``_kernels.pyx``: inputs are unpadded, ``pad`` zero
padding is applied here, and results are written into caller-provided
arrays.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _pad(x, pad):
    if pad == 0:
        return x
    N, C, H, W = x.shape
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + H, pad:pad + W] = x
    return xp


def _window(a, ky, kx, stride, Ho, Wo):
    return a[:, :, ky:ky + stride * (Ho - 1) + 1:stride, kx:kx + stride * (Wo - 1) + 1:stride]


def dw_forward(x, w, stride, pad, mult, out):
    _, K, Ho, Wo = out.shape
    kh, kw = w.shape[1:]
    xp = _pad(x, pad)
    src = np.repeat(xp, mult, axis=1) if mult > 1 else xp
    acc = np.zeros(out.shape, dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            acc += _window(src, ky, kx, stride, Ho, Wo) * w[None, :, ky, kx, None, None].astype(np.float64)
    out[...] = acc


def dw_backward_input(gy, w, stride, pad, mult, gx):
    N, K, Ho, Wo = gy.shape
    kh, kw = w.shape[1:]
    C, H, W = gx.shape[1:]
    gxp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=gx.dtype)
    for ky in range(kh):
        for kx in range(kw):
            contrib = gy * w[None, :, ky, kx, None, None]
            if mult > 1:
                contrib = contrib.reshape(N, C, mult, Ho, Wo).sum(axis=2)
            _window(gxp, ky, kx, stride, Ho, Wo)[...] += contrib
    gx += gxp[:, :, pad:pad + H, pad:pad + W]


def dw_backward_weight(x, gy, stride, pad, mult, gw):
    _, K, Ho, Wo = gy.shape
    kh, kw = gw.shape[1:]
    xp = _pad(x, pad)
    src = np.repeat(xp, mult, axis=1) if mult > 1 else xp
    g64 = gy.astype(np.float64)
    for ky in range(kh):
        for kx in range(kw):
            win = _window(src, ky, kx, stride, Ho, Wo).astype(np.float64)
            gw[:, ky, kx] = np.einsum("nkyx,nkyx->k", win, g64)


def im2col(x, kh, kw, stride, pad, Ho, Wo, cols):
    xp = _pad(x, pad)
    N, C = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    taps = as_strided(xp, shape=(N, C, kh, kw, Ho, Wo),
                      strides=(sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    cols[...] = taps.reshape(N, C * kh * kw, Ho * Wo)


def col2im(cols, kh, kw, stride, pad, Ho, Wo, gx):
    N, C, H, W = gx.shape
    gxp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=gx.dtype)
    c6 = cols.reshape(N, C, kh, kw, Ho, Wo)
    for ky in range(kh):
        for kx in range(kw):
            _window(gxp, ky, kx, stride, Ho, Wo)[...] += c6[:, :, ky, kx]
    gx += gxp[:, :, pad:pad + H, pad:pad + W]


def affine(x, scale, shift, relu, out):
    np.multiply(x, scale[None, :, None, None], out=out)
    out += shift[None, :, None, None]
    if relu:
        np.maximum(out, 0, out=out)


def _c(v):
    return v[None, :, None, None]


def bn_train_forward(x, gamma, beta, eps, relu, out, mean, var):
    mean[...] = x.mean(axis=(0, 2, 3), dtype=np.float64)
    xc = x.astype(np.float64) - _c(mean)
    var[...] = np.einsum("nchw,nchw->c", xc, xc) / (x.size // x.shape[1])
    scale = gamma / np.sqrt(var + eps)
    res = xc * _c(scale) + _c(beta)
    if relu:
        np.maximum(res, 0, out=res)
    out[...] = res


def bn_backward(x, g, out, mean, inv_std, gamma, relu, training, gx, ggamma, gbeta):
    g = g.astype(np.float64)
    if relu:
        g *= out > 0
    xhat = (x - _c(mean)) * _c(inv_std)
    gbeta[...] = g.sum(axis=(0, 2, 3))
    ggamma[...] = np.einsum("nchw,nchw->c", g, xhat)
    scale = gamma * inv_std
    if training:
        m = x.size // x.shape[1]
        g -= _c(gbeta / m)
        g -= xhat * _c(ggamma / m)
    gx[...] = g * _c(scale)
