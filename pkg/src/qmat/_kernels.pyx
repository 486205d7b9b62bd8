# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels for the dense CNN (batch-norm/relu, 3x3 tap shuffles, pooling).

Signatures mirror :mod:`qmat._kernels_py`; see that module for the contracts.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()

TAPS = tuple((dy, dx) for dy in range(3) for dx in range(3))


def channel_stats(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t i, ch, yy, xx
    cdef floating *xr
    cdef double s, s2, v, m, rs, cnt = <double>(n * h * w)
    mean = np.empty(c, dtype=np.float64)
    var = np.empty(c, dtype=np.float64)
    cdef double[::1] mv = mean
    cdef double[::1] vv = var
    for ch in range(c):
        s = 0.0
        for i in range(n):
            for yy in range(h):
                xr = &x[i, ch, yy, 0]
                rs = 0.0
                for xx in range(w):
                    rs += xr[xx]
                s += rs
        m = s / cnt
        s2 = 0.0
        for i in range(n):
            for yy in range(h):
                xr = &x[i, ch, yy, 0]
                rs = 0.0
                for xx in range(w):
                    v = xr[xx] - m
                    rs += v * v
                s2 += rs
        mv[ch] = m
        vv[ch] = s2 / cnt
    return mean, var


def affine_relu_pad(floating[:, :, :, ::1] x, double[::1] scale, double[::1] shift, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t i, ch, yy, xx
    cdef floating s, b, v
    cdef floating *xr
    cdef floating *orow
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    for i in range(n):
        for ch in range(c):
            s = <floating>scale[ch]
            b = <floating>shift[ch]
            for yy in range(h):
                xr = &x[i, ch, yy, 0]
                orow = &o[i, ch, yy + pad, pad]
                for xx in range(w):
                    v = xr[xx] * s + b
                    orow[xx] = v if v > 0 else 0
    return out


def affine_relu_grad_sums(floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                          floating[:, :, :, ::1] dout, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t i, ch, yy, xx
    cdef floating g, rs, rsx
    cdef floating *xr
    cdef floating *orow
    cdef floating *drow
    cdef double sd, sdx
    sum_dy = np.empty(c, dtype=np.float64)
    sum_dyx = np.empty(c, dtype=np.float64)
    cdef double[::1] a = sum_dy
    cdef double[::1] b = sum_dyx
    for ch in range(c):
        sd = 0.0
        sdx = 0.0
        for i in range(n):
            for yy in range(h):
                xr = &x[i, ch, yy, 0]
                orow = &out[i, ch, yy + pad, pad]
                drow = &dout[i, ch, yy + pad, pad]
                rs = 0
                rsx = 0
                for xx in range(w):
                    g = drow[xx] if orow[xx] > 0 else 0
                    rs = rs + g
                    rsx = rsx + g * xr[xx]
                sd += rs
                sdx += rsx
        a[ch] = sd
        b[ch] = sdx
    return sum_dy, sum_dyx


def affine_relu_grad_input(floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                           floating[:, :, :, ::1] dout, int pad,
                           double[::1] a, double[::1] b, double[::1] c):
    cdef Py_ssize_t n = x.shape[0], nc = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t i, ch, yy, xx
    cdef floating av, bv, cv, g
    cdef floating *xr
    cdef floating *orow
    cdef floating *drow
    cdef floating *dr
    dtype = np.float32 if floating is float else np.float64
    dx = np.empty((n, nc, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] d = dx
    for i in range(n):
        for ch in range(nc):
            av = <floating>a[ch]
            bv = <floating>b[ch]
            cv = <floating>c[ch]
            for yy in range(h):
                xr = &x[i, ch, yy, 0]
                orow = &out[i, ch, yy + pad, pad]
                drow = &dout[i, ch, yy + pad, pad]
                dr = &d[i, ch, yy, 0]
                for xx in range(w):
                    g = drow[xx] if orow[xx] > 0 else 0
                    dr[xx] = av * g + bv * xr[xx] + cv
    return dx


def shift_add(floating[:, :, :, :, ::1] y, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = y.shape[0], k = y.shape[2]
    cdef Py_ssize_t i, kk, yy, xx
    cdef floating acc
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, k, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    for i in range(n):
        for kk in range(k):
            for yy in range(h):
                for xx in range(w):
                    # taps summed in TAPS order so both backends agree closely
                    acc = y[i, 0, kk, yy, xx]
                    acc = acc + y[i, 1, kk, yy, xx + 1]
                    acc = acc + y[i, 2, kk, yy, xx + 2]
                    acc = acc + y[i, 3, kk, yy + 1, xx]
                    acc = acc + y[i, 4, kk, yy + 1, xx + 1]
                    acc = acc + y[i, 5, kk, yy + 1, xx + 2]
                    acc = acc + y[i, 6, kk, yy + 2, xx]
                    acc = acc + y[i, 7, kk, yy + 2, xx + 1]
                    acc = acc + y[i, 8, kk, yy + 2, xx + 2]
                    o[i, kk, yy, xx] = acc
    return out


def shift_scatter(floating[:, :, :, ::1] dout):
    cdef Py_ssize_t n = dout.shape[0], k = dout.shape[1], h = dout.shape[2], w = dout.shape[3]
    cdef Py_ssize_t i, t, kk, yy, xx, dy, dx
    dtype = np.float32 if floating is float else np.float64
    s = np.zeros((n, 9, k, h + 2, w + 2), dtype=dtype)
    cdef floating[:, :, :, :, ::1] sv = s
    for i in range(n):
        for t in range(9):
            dy = t // 3
            dx = t % 3
            for kk in range(k):
                for yy in range(h):
                    for xx in range(w):
                        sv[i, t, kk, yy + dy, xx + dx] = dout[i, kk, yy, xx]
    return s


def avg_pool2x2(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2] // 2, w = x.shape[3] // 2
    cdef Py_ssize_t i, ch, yy, xx
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    for i in range(n):
        for ch in range(c):
            for yy in range(h):
                for xx in range(w):
                    o[i, ch, yy, xx] = (x[i, ch, 2 * yy, 2 * xx] + x[i, ch, 2 * yy, 2 * xx + 1]
                                        + x[i, ch, 2 * yy + 1, 2 * xx]
                                        + x[i, ch, 2 * yy + 1, 2 * xx + 1]) * <floating>0.25
    return out


def avg_pool2x2_grad(floating[:, :, :, ::1] dout):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], h = dout.shape[2], w = dout.shape[3]
    cdef Py_ssize_t i, ch, yy, xx
    cdef floating g
    dtype = np.float32 if floating is float else np.float64
    dx = np.empty((n, c, 2 * h, 2 * w), dtype=dtype)
    cdef floating[:, :, :, ::1] d = dx
    for i in range(n):
        for ch in range(c):
            for yy in range(h):
                for xx in range(w):
                    g = dout[i, ch, yy, xx] * <floating>0.25
                    d[i, ch, 2 * yy, 2 * xx] = g
                    d[i, ch, 2 * yy, 2 * xx + 1] = g
                    d[i, ch, 2 * yy + 1, 2 * xx] = g
                    d[i, ch, 2 * yy + 1, 2 * xx + 1] = g
    return dx
