"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--no-step]

Shapes match a batch of 32 patches in the first dense block of the small
network. The last rows time one full training step with each backend.
"""

import argparse
import time

import numpy as np

from qmat import _kernels_py, kernels

try:
    from qmat import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

NAMES = [n for n in kernels.__all__ if n != "BACKEND"]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(dtype, n=32, c=48, h=64):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, h, h)).astype(dtype)
    scale = rng.standard_normal(c)
    shift = rng.standard_normal(c)
    out = _kernels_py.affine_relu_pad(x, scale, shift, 1)
    g = rng.standard_normal(out.shape).astype(dtype)
    b = rng.standard_normal(c)
    cc = rng.standard_normal(c)
    y = rng.standard_normal((n, 9, 8, h + 2, h + 2)).astype(dtype)
    gy = rng.standard_normal((n, 8, h, h)).astype(dtype)
    gp = rng.standard_normal((n, c, h // 2, h // 2)).astype(dtype)
    return {
        "channel_stats": lambda k: k.channel_stats(x),
        "affine_relu_pad": lambda k: k.affine_relu_pad(x, scale, shift, 1),
        "affine_relu_grad_sums": lambda k: k.affine_relu_grad_sums(x, out, g, 1),
        "affine_relu_grad_input": lambda k: k.affine_relu_grad_input(x, out, g, 1, scale, b, cc),
        "shift_add": lambda k: k.shift_add(y, h, h),
        "shift_scatter": lambda k: k.shift_scatter(gy),
        "avg_pool2x2": lambda k: k.avg_pool2x2(x),
        "avg_pool2x2_grad": lambda k: k.avg_pool2x2_grad(gp),
    }


def train_step_time(impl, repeat):
    from qmat.tensor_nn import AdamState, DenseNetConfig, DenseNetModel, TrainConfig, to_input, train_step

    saved = {n: getattr(kernels, n) for n in NAMES}
    for n in NAMES:
        setattr(kernels, n, getattr(impl, n))
    try:
        rng = np.random.default_rng(1)
        model = DenseNetModel.init(DenseNetConfig.small(dropout_rate=0.0), seed=0)
        x = to_input(rng.integers(0, 256, (32, 64, 64, 3), dtype=np.uint8))
        y = rng.uniform(1, 20, (32, 15))
        opt = AdamState()
        config = TrainConfig(learning_rate=1e-3)

        def step():
            train_step(model, opt, x, y, config, None)

        step()
        return best_of(step, repeat)
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-step", action="store_true", help="skip the full training-step timing")
    args = ap.parse_args()
    if _kernels_c is None:
        print("compiled extension not built; only the numpy fallback can be timed")
    print(f"{'kernel':<24} {'dtype':<8} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for dtype in (np.float32, np.float64):
        for name, case in kernel_cases(dtype).items():
            t_py = best_of(lambda: case(_kernels_py), args.repeat)
            if _kernels_c is None:
                print(f"{name:<24} {np.dtype(dtype).name:<8} {1e3 * t_py:>10.2f}")
                continue
            t_c = best_of(lambda: case(_kernels_c), args.repeat)
            print(f"{name:<24} {np.dtype(dtype).name:<8} {1e3 * t_py:>10.2f} {1e3 * t_c:>10.2f} {t_py / t_c:>7.1f}x")
    if not args.no_step:
        t_py = train_step_time(_kernels_py, max(2, args.repeat // 2))
        line = f"{'train step (small, b32)':<24} {'float32':<8} {1e3 * t_py:>10.1f}"
        if _kernels_c is not None:
            t_c = train_step_time(_kernels_c, max(2, args.repeat // 2))
            line += f" {1e3 * t_c:>10.1f} {t_py / t_c:>7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
