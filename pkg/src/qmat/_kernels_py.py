"""Pure-numpy reference versions of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_kernels`` extension. :mod:`qmat.kernels` picks one at import time.

Layout conventions: activations are ``(N, C, H, W)``; "padded" arrays carry a
zero border of ``pad`` pixels on each spatial side. Per-channel reductions are
returned as float64 regardless of the activation dtype.
"""

import numpy as np

# (dy, dx) for the nine taps of a 3x3 kernel, row-major.
TAPS = tuple((dy, dx) for dy in range(3) for dx in range(3))


def channel_stats(x):
    """Per-channel mean and biased variance over (N, H, W)."""
    x64 = x.astype(np.float64, copy=False)
    mean = x64.mean(axis=(0, 2, 3))
    var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def affine_relu_pad(x, scale, shift, pad):
    """``relu(x * scale[c] + shift[c])`` written into a zero-padded buffer."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    s = scale.astype(x.dtype)[None, :, None, None]
    b = shift.astype(x.dtype)[None, :, None, None]
    inner = out[:, :, pad:pad + h, pad:pad + w]
    np.multiply(x, s, out=inner)
    inner += b
    np.maximum(inner, 0, out=inner)
    return out


def _masked_grad(out, dout, pad, h, w):
    inner_out = out[:, :, pad:pad + h, pad:pad + w]
    inner_dout = dout[:, :, pad:pad + h, pad:pad + w]
    return np.where(inner_out > 0, inner_dout, 0).astype(dout.dtype, copy=False)


def affine_relu_grad_sums(x, out, dout, pad):
    """Return ``(sum dy, sum dy * x)`` per channel, ``dy`` masked by the relu."""
    n, c, h, w = x.shape
    dy = _masked_grad(out, dout, pad, h, w).astype(np.float64)
    sum_dy = dy.sum(axis=(0, 2, 3))
    sum_dyx = np.einsum("nchw,nchw->c", dy, x.astype(np.float64, copy=False))
    return sum_dy, sum_dyx


def affine_relu_grad_input(x, out, dout, pad, a, b, c):
    """``dx = a[c] * dy + b[c] * x + c[c]`` with ``dy`` the relu-masked grad."""
    n, ch, h, w = x.shape
    dy = _masked_grad(out, dout, pad, h, w)
    dt = x.dtype
    dx = dy * a.astype(dt)[None, :, None, None]
    dx += x * b.astype(dt)[None, :, None, None]
    dx += c.astype(dt)[None, :, None, None]
    return dx


def shift_add(y, h, w):
    """Collapse per-tap partial products ``(N, 9, K, H+2, W+2)`` into ``(N, K, H, W)``."""
    out = np.zeros((y.shape[0], y.shape[2], h, w), dtype=y.dtype)
    for t, (dy, dx) in enumerate(TAPS):
        out += y[:, t, :, dy:dy + h, dx:dx + w]
    return out


def shift_scatter(dout):
    """Spread ``(N, K, H, W)`` into nine shifted copies ``(N, 9, K, H+2, W+2)``."""
    n, k, h, w = dout.shape
    s = np.zeros((n, 9, k, h + 2, w + 2), dtype=dout.dtype)
    for t, (dy, dx) in enumerate(TAPS):
        s[:, t, :, dy:dy + h, dx:dx + w] = dout
    return s


def avg_pool2x2(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2x2_grad(dout):
    g = dout * dout.dtype.type(0.25)
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
