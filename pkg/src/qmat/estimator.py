"""Integer step estimates from network outputs, and per-patch MSE / accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from qmat.dataset import CHANNELS, PATCH
from qmat.jpeg_core import QTarget
from qmat.tensor_nn.densenet import DenseNetModel, forward, to_input

EVAL_BATCH = 32


def round_steps(raw) -> np.ndarray:
    """Half-up rounding to the nearest integer, then clamp to >= 1.

    Works on the fractional part so values a hair below ``n + 0.5`` never
    round up through floating-point addition.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw estimates must be finite")
    base = np.floor(raw)
    r = base + (raw - base >= 0.5)
    return np.maximum(r, 1).astype(np.int64)


@dataclass(frozen=True)
class Estimate:
    raw: np.ndarray
    rounded: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64).reshape(-1)
        rounded = np.asarray(self.rounded, dtype=np.int64).reshape(-1)
        if raw.shape != rounded.shape:
            raise ValueError("raw and rounded lengths differ")
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "rounded", rounded)

    @classmethod
    def from_raw(cls, raw) -> "Estimate":
        return cls(raw, round_steps(raw))

    @property
    def nc(self) -> int:
        return int(self.raw.size)


@dataclass(frozen=True)
class PatchMetrics:
    mse: float
    acc: float


def _values(x) -> np.ndarray:
    if isinstance(x, Estimate):
        return x.rounded
    if isinstance(x, QTarget):
        return x.values
    return np.asarray(x, dtype=np.int64)


def _check_patches(pixels) -> np.ndarray:
    a = np.asarray(pixels)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[1:] != (PATCH, PATCH, CHANNELS):
        raise ValueError(f"patches must be ({PATCH}, {PATCH}, {CHANNELS}) pixel arrays, got {np.shape(pixels)}")
    if a.dtype != np.uint8:
        if np.any(a < 0) or np.any(a > 255) or np.any(a != np.round(a)):
            raise ValueError("patch samples must be integers in [0, 255]")
        a = a.astype(np.uint8)
    return a


def predict_raw(model: DenseNetModel, pixels, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Eval-mode network outputs ``(N, nc)`` for ``(N, 64, 64, 3)`` pixel patches."""
    a = _check_patches(pixels)
    out = np.empty((len(a), model.config.nc_outputs))
    for lo in range(0, len(a), batch_size):
        out[lo:lo + batch_size] = forward(model, to_input(a[lo:lo + batch_size]), "eval").data
    return out


def estimate(model: DenseNetModel, patch) -> Estimate:
    """Estimate the leading zig-zag steps of the first-compression table of one patch."""
    a = np.asarray(patch)
    if a.shape != (PATCH, PATCH, CHANNELS):
        raise ValueError(f"patch must be ({PATCH}, {PATCH}, {CHANNELS}), got {a.shape}")
    return Estimate.from_raw(predict_raw(model, a)[0])


def estimate_many(model: DenseNetModel, pixels, batch_size: int = EVAL_BATCH) -> list[Estimate]:
    return [Estimate.from_raw(r) for r in predict_raw(model, pixels, batch_size)]


def metrics_arrays(rounded, truth) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized per-patch ``(mse, acc)`` for ``(N, nc)`` integer arrays."""
    rounded = np.asarray(rounded, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if rounded.shape != truth.shape:
        raise ValueError(f"estimate shape {rounded.shape} != truth shape {truth.shape}")
    d = (rounded - truth).astype(np.float64)
    return (d * d).mean(axis=-1), (rounded == truth).mean(axis=-1)


def patch_metrics(est, truth) -> PatchMetrics:
    """MSE and exact-match accuracy of the rounded estimate against the truth."""
    e, t = _values(est).reshape(-1), _values(truth).reshape(-1)
    if e.size != t.size:
        raise ValueError(f"length mismatch: estimate {e.size}, truth {t.size}")
    if e.size == 0:
        raise ValueError("empty estimate")
    mse, acc = metrics_arrays(e, t)
    return PatchMetrics(float(mse), float(acc))


def per_coefficient_accuracy(estimates: Sequence, truths: Sequence) -> np.ndarray:
    """Fraction of patches whose i-th rounded step is exact, for each i."""
    if len(estimates) == 0 or len(truths) == 0:
        raise ValueError("need at least one estimate/truth pair")
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimates but {len(truths)} truths")
    e = np.stack([_values(x).reshape(-1) for x in estimates])
    t = np.stack([_values(x).reshape(-1) for x in truths])
    if e.shape != t.shape:
        raise ValueError(f"estimate shape {e.shape} != truth shape {t.shape}")
    return (e == t).mean(axis=0)
