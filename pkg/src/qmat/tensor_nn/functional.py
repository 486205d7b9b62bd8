"""Differentiable ops for the dense CNN. Activations are NCHW."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from qmat import kernels
from qmat.tensor_nn.autograd import Tensor

LOG2 = math.log(2.0)


def _c(a):
    return np.ascontiguousarray(a)


def conv2d_3x3(x: Tensor, weight: Tensor, padded: bool = False) -> Tensor:
    """Stride-1 3x3 convolution with zero "same" padding, no bias.

    ``weight`` is ``(K, C, 3, 3)``. With ``padded=True`` the input already
    carries a one-pixel zero border and the output is two pixels smaller.

    All nine taps are computed by one GEMM against the padded input, giving
    ``(N, 9, K, H+2, W+2)`` partial products that are then shifted and summed.
    The backward pass mirrors this, so no im2col buffer is ever built.
    """
    xd = x.data
    wd = weight.data
    if xd.ndim != 4:
        raise ValueError(f"conv input must be NCHW, got shape {xd.shape}")
    k, c = wd.shape[:2]
    if wd.shape != (k, c, 3, 3):
        raise ValueError(f"kernel must be (K, C, 3, 3), got {wd.shape}")
    if xd.shape[1] != c:
        raise ValueError(f"input has {xd.shape[1]} channels, kernel expects {c}")
    xp = _c(xd) if padded else np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    n, _, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    if h < 1 or w < 1:
        raise ValueError("padded input too small")
    w_all = _c(wd.transpose(2, 3, 0, 1).reshape(9 * k, c))
    xflat = xp.reshape(n, c, hp * wp)
    y = np.matmul(w_all, xflat).reshape(n, 9, k, hp, wp)
    out = kernels.shift_add(y, h, w)
    del y

    def backward(g):
        s = kernels.shift_scatter(_c(g.astype(xp.dtype, copy=False))).reshape(n, 9 * k, hp * wp)
        gx = gw = None
        if x.requires_grad:
            gxp = np.matmul(w_all.T, s).reshape(n, c, hp, wp)
            gx = gxp if padded else _c(gxp[:, :, 1:-1, 1:-1])
        if weight.requires_grad:
            gw_all = np.matmul(s, xflat.transpose(0, 2, 1)).sum(axis=0)
            gw = _c(gw_all.reshape(3, 3, k, c).transpose(2, 3, 0, 1))
        return gx, gw

    return Tensor.from_op(out, (x, weight), backward)


@dataclass
class BatchNormState:
    """Running statistics of one normalization layer (float64)."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm_relu(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    pad: int = 0,
) -> Tensor:
    """``relu(gamma * (x - mean) / sqrt(var + eps) + beta)`` per channel.

    Training uses batch statistics over (N, H, W) and updates ``state`` in
    place; eval uses the running statistics, which also makes the layer a
    fixed per-channel affine map usable at batch size 1. ``pad`` writes the
    result into a zero border so a following conv can skip its own padding.
    """
    xd = _c(x.data)
    if xd.ndim != 4:
        raise ValueError(f"batch norm input must be NCHW, got {xd.shape}")
    n, c, h, w = xd.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    m = n * h * w
    if training:
        mean, var = kernels.channel_stats(xd)
        unbiased = var * m / max(m - 1, 1)
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var = (1 - momentum) * state.running_var + momentum * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    invstd = 1.0 / np.sqrt(var + eps)
    scale = gamma.data.astype(np.float64) * invstd
    shift = beta.data.astype(np.float64) - mean * scale
    out = kernels.affine_relu_pad(xd, scale, shift, pad)

    def backward(g):
        g = _c(g.astype(xd.dtype, copy=False))
        sum_dy, sum_dyx = kernels.affine_relu_grad_sums(xd, out, g, pad)
        dbeta = sum_dy
        dgamma = invstd * (sum_dyx - mean * sum_dy)
        gx = None
        if x.requires_grad:
            if training:
                b = -scale * invstd * dgamma / m
                cc = scale * (mean * invstd * dgamma - dbeta) / m
            else:
                b = np.zeros(c)
                cc = np.zeros(c)
            gx = kernels.affine_relu_grad_input(xd, out, g, pad, scale, b, cc)
        return gx, dgamma, dbeta

    return Tensor.from_op(out, (x, gamma, beta), backward, op="batch_norm_relu")


def avg_pool2x2(x: Tensor) -> Tensor:
    xd = _c(x.data)
    if xd.ndim != 4 or xd.shape[2] % 2 or xd.shape[3] % 2:
        raise ValueError(f"2x2 pooling needs even spatial dims, got {xd.shape}")
    out = kernels.avg_pool2x2(xd)

    def backward(g):
        return (kernels.avg_pool2x2_grad(_c(g.astype(xd.dtype, copy=False))),)

    return Tensor.from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial dims: ``(N, C, H, W) -> (N, C)``."""
    xd = x.data
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))

    def backward(g):
        gx = np.empty_like(xd)
        gx[...] = (g / (h * w)).astype(xd.dtype)[:, :, None, None]
        return (gx,)

    return Tensor.from_op(out, (x,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(_c(g[tuple(idx)]))
        return tuple(grads)

    return Tensor.from_op(out, tensors, backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when ``rate == 0``."""
    if not training or rate <= 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    keep = rng.random(x.shape, dtype=dt) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return Tensor.from_op(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``(in, out)``."""
    if x.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor.from_op(out, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return Tensor.from_op(out, (x,), backward, op="relu")


def _check_pair(pred: Tensor, target) -> np.ndarray:
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {t.shape}")
    return t


def logcosh_elementwise(t):
    """``log(cosh(t))`` without overflow or small-argument cancellation.

    Large ``|t|`` uses ``|t| + log1p(exp(-2|t|)) - log 2``; near zero that
    form loses everything to cancellation, so ``log1p(2 sinh(t/2)^2)`` is
    used instead (exact identity, since ``cosh t - 1 = 2 sinh(t/2)^2``).
    """
    a = np.abs(np.asarray(t))
    small = np.minimum(a, 1.0)
    near = np.log1p(2.0 * np.sinh(0.5 * small) ** 2)
    far = a + np.log1p(np.exp(-2.0 * a)) - LOG2
    return np.where(a <= 1.0, near, far)


def logcosh_loss(pred: Tensor, target) -> Tensor:
    """Mean over batch and outputs of ``log(cosh(target - pred))``."""
    t = _check_pair(pred, target)
    d = pred.data - t
    out = np.asarray(logcosh_elementwise(d).mean(), dtype=pred.dtype)

    def backward(g):
        return (g * np.tanh(d) / d.size,)

    return Tensor.from_op(out, (pred,), backward)


def l2_loss(pred: Tensor, target) -> Tensor:
    """Mean over batch and outputs of ``(target - pred) ** 2``."""
    t = _check_pair(pred, target)
    d = pred.data - t
    out = np.asarray((d * d).mean(), dtype=pred.dtype)

    def backward(g):
        return (g * 2.0 * d / d.size,)

    return Tensor.from_op(out, (pred,), backward)


LOSSES = {"logcosh": logcosh_loss, "l2": l2_loss}
