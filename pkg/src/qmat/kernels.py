"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly; otherwise the numpy
versions are used. Set ``QMAT_KERNELS=python`` to force the fallback.
"""

import os

from qmat import _kernels_py

if os.environ.get("QMAT_KERNELS", "").lower() in ("python", "numpy", "py"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from qmat import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

channel_stats = _impl.channel_stats
affine_relu_pad = _impl.affine_relu_pad
affine_relu_grad_sums = _impl.affine_relu_grad_sums
affine_relu_grad_input = _impl.affine_relu_grad_input
shift_add = _impl.shift_add
shift_scatter = _impl.shift_scatter
avg_pool2x2 = _impl.avg_pool2x2
avg_pool2x2_grad = _impl.avg_pool2x2_grad

__all__ = [
    "BACKEND",
    "channel_stats",
    "affine_relu_pad",
    "affine_relu_grad_sums",
    "affine_relu_grad_input",
    "shift_add",
    "shift_scatter",
    "avg_pool2x2",
    "avg_pool2x2_grad",
]
