"""Baseline JPEG block arithmetic: DCT, quantization, quality scaling, zig-zag.

No entropy coding happens here. A "JPEG cycle" is the lossy part of a
compress/decompress round trip carried out directly on pixel arrays:

    RGB -> YCbCr -> (per 8x8 block) level shift, DCT, quantize,
    dequantize, IDCT, unshift, clamp, round -> RGB

Chroma is kept at full resolution (4:4:4). Images are ``uint8`` arrays shaped
``(H, W)`` or ``(H, W, C)`` with ``C`` in ``{1, 3}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

# ITU-T T.81 Annex K reference tables, natural (row-major) order.
LUMA_BASE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)

CHROMA_BASE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.int64,
)


def _zigzag_order() -> np.ndarray:
    # walk anti-diagonals, alternating direction; odd diagonals run top-right to bottom-left
    order = []
    for s in range(15):
        cells = [(r, s - r) for r in range(8) if 0 <= s - r < 8]
        if s % 2 == 0:
            cells.reverse()
        order.extend(r * 8 + c for r, c in cells)
    return np.array(order, dtype=np.int64)


#: ``ZIGZAG[i]`` is the row-major index of the i-th coefficient in scan order.
ZIGZAG = _zigzag_order()
#: inverse permutation: ``INVERSE_ZIGZAG[row * 8 + col]`` is the scan position.
INVERSE_ZIGZAG = np.argsort(ZIGZAG)

DEFAULT_NC = 15


@dataclass(frozen=True, eq=False)
class QuantMatrix:
    """8x8 table of quantization steps in natural order; ``steps[0, 0]`` is DC."""

    steps: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps)
        if steps.shape != (8, 8):
            raise ValueError(f"quantization matrix must be 8x8, got {steps.shape}")
        if not np.issubdtype(steps.dtype, np.integer):
            if not np.all(steps == np.round(steps)):
                raise ValueError("quantization steps must be integers")
        steps = steps.astype(np.int64)
        if steps.min() < 1 or steps.max() > 255:
            raise ValueError("quantization steps must lie in [1, 255]")
        steps.setflags(write=False)
        object.__setattr__(self, "steps", steps)

    def __eq__(self, other):
        return isinstance(other, QuantMatrix) and np.array_equal(self.steps, other.steps)

    def __hash__(self):
        return hash(self.steps.tobytes())

    def __repr__(self):
        return f"QuantMatrix(dc={int(self.steps[0, 0])}, zigzag={zigzag(self)[:6].tolist()}...)"

    @classmethod
    def from_qf(cls, qf: int, channel: str = "luma") -> "QuantMatrix":
        return qf_to_table(qf, channel)

    @classmethod
    def ones(cls) -> "QuantMatrix":
        return cls(np.ones((8, 8), dtype=np.int64))


@dataclass(frozen=True)
class GridShift:
    """Pixel offset of the second compression grid relative to the first."""

    dx: int = 0
    dy: int = 0

    def __post_init__(self):
        for name in ("dx", "dy"):
            v = getattr(self, name)
            if not (0 <= int(v) <= 7):
                raise ValueError(f"grid shift {name}={v} outside [0, 7]")
            object.__setattr__(self, name, int(v))

    @property
    def aligned(self) -> bool:
        return self.dx == 0 and self.dy == 0


@dataclass(frozen=True, eq=False)
class QTarget:
    """Leading ``nc`` zig-zag quantization steps; the regression label."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int64).reshape(-1)
        if not 1 <= v.size <= 64:
            raise ValueError(f"target length must be in [1, 64], got {v.size}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def nc(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        return isinstance(other, QTarget) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())

    def __repr__(self):
        return f"QTarget({self.values.tolist()})"

    @classmethod
    def from_matrix(cls, q: QuantMatrix, nc: int = DEFAULT_NC) -> "QTarget":
        if not 1 <= nc <= 64:
            raise ValueError(f"nc must be in [1, 64], got {nc}")
        return cls(zigzag(q)[:nc])

    @classmethod
    def from_qf(cls, qf: int, nc: int = DEFAULT_NC) -> "QTarget":
        return cls.from_matrix(qf_to_table(qf, "luma"), nc)


Tables = Union[QuantMatrix, "tuple[QuantMatrix, QuantMatrix]"]


# ---------------------------------------------------------------- transforms

def _dct_basis() -> np.ndarray:
    u = np.arange(8)[:, None]
    x = np.arange(8)[None, :]
    c = np.cos((2 * x + 1) * u * np.pi / 16)
    c *= np.where(u == 0, np.sqrt(1 / 8), np.sqrt(2 / 8))
    return c


#: Orthonormal DCT-II matrix: ``coeffs = D @ block @ D.T``.
DCT_MATRIX = _dct_basis()
DCT_MATRIX.setflags(write=False)


def dct2d_8x8(block):
    """Orthonormal 2-D type-II DCT of an 8x8 block (or a stack ``(..., 8, 8)``)."""
    b = np.asarray(block, dtype=np.float64)
    if b.shape[-2:] != (8, 8):
        raise ValueError(f"expected trailing 8x8 block, got {b.shape}")
    return DCT_MATRIX @ b @ DCT_MATRIX.T


def idct2d_8x8(coeffs):
    """Inverse of :func:`dct2d_8x8`."""
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape[-2:] != (8, 8):
        raise ValueError(f"expected trailing 8x8 block, got {c.shape}")
    return DCT_MATRIX.T @ c @ DCT_MATRIX


def _steps(q) -> np.ndarray:
    return q.steps if isinstance(q, QuantMatrix) else QuantMatrix(q).steps


def quantize(coeffs, q) -> np.ndarray:
    """Divide by the step table and round half away from zero."""
    ratio = np.asarray(coeffs, dtype=np.float64) / _steps(q)
    return (np.sign(ratio) * np.floor(np.abs(ratio) + 0.5)).astype(np.int64)


def dequantize(levels, q) -> np.ndarray:
    return np.asarray(levels, dtype=np.int64) * _steps(q).astype(np.float64)


def qf_to_table(qf: int, channel: str = "luma") -> QuantMatrix:
    """Scale the Annex K table for quality ``qf`` the way libjpeg does.

    ``S = 5000 // qf`` below 50 and ``200 - 2 * qf`` otherwise, then each
    entry is ``(base * S + 50) // 100`` clamped to [1, 255]. Integer division
    throughout, which is what reference encoders emit.
    """
    if isinstance(qf, bool) or int(qf) != qf:
        raise ValueError(f"quality factor must be an integer, got {qf!r}")
    qf = int(qf)
    if not 1 <= qf <= 100:
        raise ValueError(f"quality factor must be in [1, 100], got {qf}")
    if channel == "luma":
        base = LUMA_BASE
    elif channel == "chroma":
        base = CHROMA_BASE
    else:
        raise ValueError(f"channel must be 'luma' or 'chroma', got {channel!r}")
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    return QuantMatrix(np.clip((base * scale + 50) // 100, 1, 255))


def tables_for_qf(qf: int) -> tuple[QuantMatrix, QuantMatrix]:
    return qf_to_table(qf, "luma"), qf_to_table(qf, "chroma")


def zigzag(q) -> np.ndarray:
    """Flatten an 8x8 matrix in zig-zag scan order (64-vector)."""
    m = q.steps if isinstance(q, QuantMatrix) else np.asarray(q)
    if m.shape != (8, 8):
        raise ValueError(f"expected 8x8 matrix, got {m.shape}")
    return m.reshape(64)[ZIGZAG].copy()


def inverse_zigzag(v) -> np.ndarray:
    """Rebuild the natural-order 8x8 matrix from a zig-zag 64-vector."""
    v = np.asarray(v)
    if v.shape != (64,):
        raise ValueError(f"expected 64-vector, got {v.shape}")
    return v[INVERSE_ZIGZAG].reshape(8, 8)


# ---------------------------------------------------------------- color

_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
_YCC2RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136286, -0.714136286],
        [1.0, 1.772, 0.0],
    ]
)


def _round_clip_u8(x) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def rgb_to_ycbcr(rgb) -> np.ndarray:
    """JFIF full-range conversion, returned as rounded 8-bit samples."""
    ycc = np.asarray(rgb, dtype=np.float64) @ _RGB2YCC.T
    ycc[..., 1:] += 128.0
    return _round_clip_u8(ycc)


def ycbcr_to_rgb(ycc) -> np.ndarray:
    y = np.asarray(ycc, dtype=np.float64).copy()
    y[..., 1:] -= 128.0
    return _round_clip_u8(y @ _YCC2RGB.T)


# ---------------------------------------------------------------- cycles

def _as_image(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError(f"image must be HxW, HxWx1 or HxWx3, got {np.asarray(img).shape}")
    if a.shape[0] < 8 or a.shape[1] < 8:
        raise ValueError(f"image must be at least 8x8, got {a.shape[:2]}")
    if a.dtype != np.uint8:
        if a.min() < 0 or a.max() > 255 or not np.all(a == np.round(a)):
            raise ValueError("pixel samples must be integers in [0, 255]")
        a = a.astype(np.uint8)
    return a


def _split_tables(q: Tables) -> tuple[QuantMatrix, QuantMatrix]:
    if isinstance(q, QuantMatrix):
        return q, q
    luma, chroma = q
    return luma, chroma


def cycle_plane(plane, q: QuantMatrix) -> np.ndarray:
    """Lossy round trip of one 8-bit plane whose sides are multiples of 8."""
    h, w = plane.shape
    blocks = plane.astype(np.float64).reshape(h // 8, 8, w // 8, 8).swapaxes(1, 2) - 128.0
    coeffs = DCT_MATRIX @ blocks @ DCT_MATRIX.T
    steps = q.steps.astype(np.float64)
    ratio = coeffs / steps
    levels = np.sign(ratio) * np.floor(np.abs(ratio) + 0.5)
    recon = DCT_MATRIX.T @ (levels * steps) @ DCT_MATRIX + 128.0
    return _round_clip_u8(recon.swapaxes(1, 2).reshape(h, w))


def jpeg_cycle(img, q: Tables) -> np.ndarray:
    """Compress and decompress ``img`` with table(s) ``q``.

    ``q`` is either a single :class:`QuantMatrix` (used for every channel)
    or a ``(luma, chroma)`` pair. Output has the input's shape.
    """
    a = _as_image(img)
    h, w, c = a.shape
    if h % 8 or w % 8:
        raise ValueError(f"image dimensions must be multiples of 8, got {h}x{w}")
    luma, chroma = _split_tables(q)
    if c == 1:
        out = cycle_plane(a[:, :, 0], luma)[:, :, None]
    else:
        ycc = rgb_to_ycbcr(a)
        planes = [cycle_plane(ycc[:, :, 0], luma),
                  cycle_plane(ycc[:, :, 1], chroma),
                  cycle_plane(ycc[:, :, 2], chroma)]
        out = ycbcr_to_rgb(np.stack(planes, axis=-1))
    return out if np.asarray(img).ndim == 3 else out[:, :, 0]


def crop_to_blocks(img) -> np.ndarray:
    """Drop trailing rows/columns so both sides are multiples of 8."""
    a = np.asarray(img)
    h, w = a.shape[:2]
    return a[: h - h % 8, : w - w % 8]


def double_compress(img, q1: Tables, q2: Tables, shift: GridShift = GridShift()) -> np.ndarray:
    """Compress with ``q1``, decode, shift the grid, recompress with ``q2``.

    The shift is realized by cropping ``shift.dy`` rows and ``shift.dx``
    columns off the top-left of the first decode; trailing pixels are then
    trimmed back to whole blocks. ``GridShift(0, 0)`` is the aligned case.
    """
    a = _as_image(img)
    first = jpeg_cycle(a, q1)
    moved = crop_to_blocks(first[shift.dy:, shift.dx:])
    if moved.shape[0] < 8 or moved.shape[1] < 8:
        raise ValueError("image too small for the requested grid shift")
    out = jpeg_cycle(moved, q2)
    return out if np.asarray(img).ndim == 3 else out[:, :, 0]
