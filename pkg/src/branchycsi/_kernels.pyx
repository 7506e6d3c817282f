# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

Depthwise kernels take the unpadded input and skip out-of-range taps, which
is equivalent to zero padding without materializing the padded copy.
Output channel ``k`` reads input channel ``k // mult``.
"""
from cython cimport floating
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy, memset
from libc.math cimport fmax


cdef inline void _ox_range(Py_ssize_t kx, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t W,
                           Py_ssize_t Wo, Py_ssize_t *lo, Py_ssize_t *hi) noexcept nogil:
    # valid ox satisfy 0 <= ox*stride + kx - pad < W
    cdef Py_ssize_t a = pad - kx
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    cdef Py_ssize_t b = W - 1 + pad - kx
    hi[0] = 0 if b < 0 else b // stride + 1
    if hi[0] > Wo:
        hi[0] = Wo


def dw_forward(const floating[:, :, :, ::1] x, const floating[:, :, ::1] w, int stride, int pad, int mult,
               floating[:, :, :, ::1] out):
    cdef Py_ssize_t N = out.shape[0], K = out.shape[1], Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t n, k, oy, ox, ky, kx, iy, lo, hi, base
    cdef double wv
    cdef const floating *xrow
    cdef floating *orow
    cdef double *acc = <double *> malloc((Wo + 1) * sizeof(double))
    if acc == NULL:
        raise MemoryError()
    try:
        with nogil:
            for n in range(N):
                for k in range(K):
                    for oy in range(Ho):
                        memset(acc, 0, Wo * sizeof(double))
                        for ky in range(kh):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= H:
                                continue
                            xrow = &x[n, k // mult, iy, 0]
                            for kx in range(kw):
                                wv = w[k, ky, kx]
                                _ox_range(kx, stride, pad, W, Wo, &lo, &hi)
                                base = kx - pad
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        acc[ox] += wv * xrow[ox + base]
                                else:
                                    for ox in range(lo, hi):
                                        acc[ox] += wv * xrow[ox * stride + base]
                        orow = &out[n, k, oy, 0]
                        for ox in range(Wo):
                            orow[ox] = <floating> acc[ox]
    finally:
        free(acc)


def dw_backward_input(const floating[:, :, :, ::1] gy, const floating[:, :, ::1] w, int stride, int pad, int mult,
                      floating[:, :, :, ::1] gx):
    """Accumulates into ``gx`` (unpadded input shape)."""
    cdef Py_ssize_t N = gy.shape[0], K = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t H = gx.shape[2], W = gx.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t n, k, oy, ox, ky, kx, iy, lo, hi, base
    cdef floating wv
    cdef const floating *gyrow
    cdef floating *gxrow
    with nogil:
        for n in range(N):
            for k in range(K):
                for oy in range(Ho):
                    gyrow = &gy[n, k, oy, 0]
                    for ky in range(kh):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= H:
                            continue
                        gxrow = &gx[n, k // mult, iy, 0]
                        for kx in range(kw):
                            wv = w[k, ky, kx]
                            _ox_range(kx, stride, pad, W, Wo, &lo, &hi)
                            base = kx - pad
                            if stride == 1:
                                for ox in range(lo, hi):
                                    gxrow[ox + base] += wv * gyrow[ox]
                            else:
                                for ox in range(lo, hi):
                                    gxrow[ox * stride + base] += wv * gyrow[ox]


def dw_backward_weight(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] gy, int stride, int pad, int mult,
                       floating[:, :, ::1] gw):
    """Per tap, products are accumulated into a per-column double buffer, then summed in column order."""
    cdef Py_ssize_t N = gy.shape[0], K = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = gw.shape[1], kw = gw.shape[2]
    cdef Py_ssize_t n, k, oy, ox, ky, kx, iy, lo, hi, base
    cdef double total
    cdef double *buf
    cdef const floating *gyrow
    cdef const floating *xrow
    cdef double *acc = <double *> malloc((kh * kw * Wo + 1) * sizeof(double))
    if acc == NULL:
        raise MemoryError()
    try:
        with nogil:
            for k in range(K):
                memset(acc, 0, kh * kw * Wo * sizeof(double))
                for n in range(N):
                    for oy in range(Ho):
                        gyrow = &gy[n, k, oy, 0]
                        for ky in range(kh):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= H:
                                continue
                            xrow = &x[n, k // mult, iy, 0]
                            for kx in range(kw):
                                buf = acc + (ky * kw + kx) * Wo
                                _ox_range(kx, stride, pad, W, Wo, &lo, &hi)
                                base = kx - pad
                                if stride == 1:
                                    for ox in range(lo, hi):
                                        buf[ox] += <double> xrow[ox + base] * gyrow[ox]
                                else:
                                    for ox in range(lo, hi):
                                        buf[ox] += <double> xrow[ox * stride + base] * gyrow[ox]
                for ky in range(kh):
                    for kx in range(kw):
                        buf = acc + (ky * kw + kx) * Wo
                        total = 0.0
                        for ox in range(Wo):
                            total += buf[ox]
                        gw[k, ky, kx] = <floating> total
    finally:
        free(acc)


def im2col(const floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad, int Ho, int Wo,
           floating[:, :, ::1] cols):
    """cols[n, (c*kh + ky)*kw + kx, oy*Wo + ox] = x[n, c, oy*stride+ky-pad, ox*stride+kx-pad] (0 outside)."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, ky, kx, oy, ox, row, iy, lo, hi, base
    with nogil:
        for n in range(N):
            for c in range(C):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (c * kh + ky) * kw + kx
                        _ox_range(kx, stride, pad, W, Wo, &lo, &hi)
                        base = kx - pad
                        for oy in range(Ho):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= H:
                                for ox in range(Wo):
                                    cols[n, row, oy * Wo + ox] = 0
                                continue
                            for ox in range(lo):
                                cols[n, row, oy * Wo + ox] = 0
                            if stride == 1 and hi > lo:
                                # contiguous run of the input row
                                memcpy(&cols[n, row, oy * Wo + lo], &x[n, c, iy, lo + base],
                                       (hi - lo) * sizeof(floating))
                            else:
                                for ox in range(lo, hi):
                                    cols[n, row, oy * Wo + ox] = x[n, c, iy, ox * stride + base]
                            for ox in range(hi, Wo):
                                cols[n, row, oy * Wo + ox] = 0


def col2im(const floating[:, :, ::1] cols, int kh, int kw, int stride, int pad, int Ho, int Wo,
           floating[:, :, :, ::1] gx):
    """Adjoint of im2col; accumulates into ``gx`` (unpadded input shape)."""
    cdef Py_ssize_t N = gx.shape[0], C = gx.shape[1], H = gx.shape[2], W = gx.shape[3]
    cdef Py_ssize_t n, c, ky, kx, oy, ox, row, iy, lo, hi, base
    with nogil:
        for n in range(N):
            for c in range(C):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (c * kh + ky) * kw + kx
                        _ox_range(kx, stride, pad, W, Wo, &lo, &hi)
                        base = kx - pad
                        for oy in range(Ho):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(lo, hi):
                                gx[n, c, iy, ox * stride + base] += cols[n, row, oy * Wo + ox]


def affine(const floating[:, :, :, ::1] x, const floating[::1] scale, const floating[::1] shift, bint relu,
           floating[:, :, :, ::1] out):
    """out[n, c] = x[n, c] * scale[c] + shift[c], clamped at zero when ``relu``."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, i, j
    cdef floating s, b, v
    cdef const floating *xrow
    cdef floating *orow
    with nogil:
        for n in range(N):
            for c in range(C):
                s = scale[c]
                b = shift[c]
                for i in range(H):
                    xrow = &x[n, c, i, 0]
                    orow = &out[n, c, i, 0]
                    if relu:
                        for j in range(W):
                            v = xrow[j] * s
                            v = v + b
                            orow[j] = v if v > 0 else 0
                    else:
                        for j in range(W):
                            v = xrow[j] * s
                            orow[j] = v + b


cdef inline double _lane_sum(double *lanes) noexcept nogil:
    return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))


def bn_train_forward(const floating[:, :, :, ::1] x, const double[::1] gamma, const double[::1] beta, double eps, bint relu,
                     floating[:, :, :, ::1] out, double[::1] mean, double[::1] var):
    """Batch statistics in double (two-pass), then ``out = gamma * xhat + beta`` (optionally relu).

    Reductions run over eight fixed accumulator lanes so they vectorize while
    keeping a deterministic summation order.
    """
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], P = x.shape[2] * x.shape[3]
    cdef Py_ssize_t P8 = P - P % 8
    cdef Py_ssize_t n, c, i, j
    cdef double s, d, mu, scale, shift, v
    cdef double lanes[8]
    cdef const floating *xp
    cdef floating *op
    with nogil:
        for c in range(C):
            for j in range(8):
                lanes[j] = 0.0
            s = 0.0
            for n in range(N):
                xp = &x[n, c, 0, 0]
                for i in range(0, P8, 8):
                    for j in range(8):
                        lanes[j] += xp[i + j]
                for i in range(P8, P):
                    s += xp[i]
            mu = (_lane_sum(lanes) + s) / (N * P)
            for j in range(8):
                lanes[j] = 0.0
            s = 0.0
            for n in range(N):
                xp = &x[n, c, 0, 0]
                for i in range(0, P8, 8):
                    for j in range(8):
                        d = xp[i + j] - mu
                        lanes[j] += d * d
                for i in range(P8, P):
                    d = xp[i] - mu
                    s += d * d
            mean[c] = mu
            var[c] = (_lane_sum(lanes) + s) / (N * P)
            scale = gamma[c] / (var[c] + eps) ** 0.5
            shift = beta[c]
            for n in range(N):
                xp = &x[n, c, 0, 0]
                op = &out[n, c, 0, 0]
                for i in range(P):
                    v = (xp[i] - mu) * scale + shift
                    if relu:
                        v = fmax(v, 0.0)
                    op[i] = <floating> v


def bn_backward(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] g, const floating[:, :, :, ::1] out,
                const double[::1] mean, const double[::1] inv_std, const double[::1] gamma, bint relu, bint training,
                floating[:, :, :, ::1] gx, double[::1] ggamma, double[::1] gbeta):
    """Gradients of batch norm (with optional fused relu); ``gx`` is overwritten."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], P = x.shape[2] * x.shape[3]
    cdef Py_ssize_t P8 = P - P % 8
    cdef Py_ssize_t n, c, i, j
    cdef double sg, sgx, gi, mu, istd, scale, cb, cg
    cdef double lg[8]
    cdef double lgx[8]
    cdef Py_ssize_t m = N * P
    cdef const floating *xp
    cdef const floating *gp
    cdef const floating *op
    cdef floating *gxp
    with nogil:
        for c in range(C):
            mu, istd = mean[c], inv_std[c]
            for j in range(8):
                lg[j] = 0.0
                lgx[j] = 0.0
            sg = 0.0
            sgx = 0.0
            for n in range(N):
                xp = &x[n, c, 0, 0]
                gp = &g[n, c, 0, 0]
                op = &out[n, c, 0, 0]
                for i in range(0, P8, 8):
                    for j in range(8):
                        gi = gp[i + j]
                        if relu:
                            gi = gi * (op[i + j] > 0)
                        lg[j] += gi
                        lgx[j] += gi * (xp[i + j] - mu)
                for i in range(P8, P):
                    gi = gp[i]
                    if relu:
                        gi = gi * (op[i] > 0)
                    sg += gi
                    sgx += gi * (xp[i] - mu)
            sg += _lane_sum(lg)
            sgx = (sgx + _lane_sum(lgx)) * istd
            gbeta[c] = sg
            ggamma[c] = sgx
            scale = gamma[c] * istd
            if training:
                cb = sg / m
                cg = sgx / m * istd
            else:
                cb = 0.0
                cg = 0.0
            for n in range(N):
                xp = &x[n, c, 0, 0]
                gp = &g[n, c, 0, 0]
                op = &out[n, c, 0, 0]
                gxp = &gx[n, c, 0, 0]
                for i in range(P):
                    gi = gp[i]
                    if relu:
                        gi = gi * (op[i] > 0)
                    gxp[i] = <floating> (scale * (gi - cb - (xp[i] - mu) * cg))
