"""Labeled double-JPEG patch generation and the ``.qmds`` shard format.

A source image is compressed once per first-pass quality ``qf1`` with a
random grid shift before the second pass at ``qf2``; up to ``cap`` 64x64
patches are then cut from random pixel offsets of the result. Each patch is
labeled with the leading zig-zag steps of the first luma table.

Shard layout (little-endian)::

    "QMDS" u16 version u16 patch_h u16 patch_w u16 channels u16 nc u64 count
    count x [u8 qf1 u8 qf2 u8 dx u8 dy u16 id_len id_bytes nc*u16 label h*w*c u8 pixels]
"""

from __future__ import annotations

import logging
import os
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from qmat.jpeg_core import (
    DEFAULT_NC,
    GridShift,
    QTarget,
    crop_to_blocks,
    double_compress,
    tables_for_qf,
)

log = logging.getLogger(__name__)

PATCH = 64
CHANNELS = 3
MIN_SIDE = 72
SHARD_MAGIC = b"QMDS"
SHARD_VERSION = 1
_HEADER = struct.Struct("<4sHHHHHQ")
_RECORD_HEAD = struct.Struct("<BBBBH")

#: First-pass grids used for training at QF2 = 90 and QF2 = 80.
QF1_GRID_QF2_90 = (60, 65, 70, 75, 80, 85, 90, 95, 98)
QF1_GRID_QF2_80 = (55, 60, 65, 70, 75, 80, 85, 90, 95)

SPLITS = ("train", "val", "test")


class ShardError(ValueError):
    """Malformed, truncated or incompatible shard file."""


class SourceImageError(ValueError):
    """Source image unreadable, lossy, or too small."""


@dataclass(frozen=True, eq=False)
class PatchRecord:
    pixels: np.ndarray  # (64, 64, 3) uint8
    label: QTarget
    qf1: int
    qf2: int
    shift: GridShift
    source_id: str

    @property
    def aligned(self) -> bool:
        return self.shift.aligned

    def __eq__(self, other):
        return (
            isinstance(other, PatchRecord)
            and self.qf1 == other.qf1
            and self.qf2 == other.qf2
            and self.shift == other.shift
            and self.source_id == other.source_id
            and self.label == other.label
            and np.array_equal(self.pixels, other.pixels)
        )

    __hash__ = None


@dataclass(frozen=True)
class DatasetManifest:
    split: str = "train"
    qf2: int = 90
    qf1_grid: tuple = QF1_GRID_QF2_90
    patches_per_image_cap: int = 100
    patches_per_image_test: int = 5
    seed: int = 0
    nc: int = DEFAULT_NC

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        grid = tuple(int(q) for q in self.qf1_grid)
        if not grid:
            raise ValueError("qf1_grid must not be empty")
        for q in grid + (self.qf2,):
            if not 1 <= int(q) <= 100:
                raise ValueError(f"quality factor {q} outside [1, 100]")
        if self.patches_per_image_cap < 1 or self.patches_per_image_test < 1:
            raise ValueError("patch caps must be >= 1")
        if not 1 <= self.nc <= 64:
            raise ValueError(f"nc must be in [1, 64], got {self.nc}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")
        object.__setattr__(self, "qf1_grid", grid)

    @property
    def cap(self) -> int:
        return self.patches_per_image_test if self.split == "test" else self.patches_per_image_cap


# ---------------------------------------------------------------- sources

_LOSSLESS_TIFF = {"raw", "tiff_lzw", "tiff_adobe_deflate", "tiff_deflate", "packbits", None}


def _to_rgb_array(im: Image.Image) -> np.ndarray:
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        a = np.asarray(im).astype(np.int64)
        top = 65535 if a.max() > 255 else 255
        a = (a * 255 + top // 2) // top
        a = np.clip(a, 0, 255).astype(np.uint8)
        return np.repeat(a[:, :, None], 3, axis=2)
    if im.mode in ("1", "L", "LA"):
        a = np.asarray(im.convert("L"), dtype=np.uint8)
        return np.repeat(a[:, :, None], 3, axis=2)
    return np.asarray(im.convert("RGB"), dtype=np.uint8)


def ingest_image(path) -> np.ndarray:
    """Load a lossless PNG/TIFF as an ``(H, W, 3)`` uint8 array.

    Grayscale sources are replicated to three channels. Raises
    :class:`SourceImageError` for unreadable, lossy or undersized inputs.
    """
    path = Path(path)
    try:
        im = Image.open(path)
        im.load()
    except (OSError, Image.DecompressionBombError) as exc:
        raise SourceImageError(f"{path}: unreadable image ({exc})") from exc
    fmt = im.format
    if fmt == "TIFF":
        comp = im.info.get("compression")
        if comp not in _LOSSLESS_TIFF:
            raise SourceImageError(f"{path}: lossy or unsupported TIFF compression {comp!r}")
    elif fmt != "PNG":
        raise SourceImageError(f"{path}: unsupported or lossy format {fmt!r}; need PNG or TIFF")
    arr = _to_rgb_array(im)
    h, w = arr.shape[:2]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise SourceImageError(f"{path}: image too small ({w}x{h}); need at least {MIN_SIDE}x{MIN_SIDE}")
    return arr


def synthetic_image(rng: np.random.Generator, height: int = 256, width: int = 256) -> np.ndarray:
    """Procedural never-compressed color image with natural-ish statistics.

    Power-law color noise (amplitude ~ 1/f, i.e. the 1/f^2 power spectrum of
    natural scenes) plus a handful of hard-edged shapes and mild sensor
    noise, kept away from the clipping range.
    """
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    radius = np.sqrt(fy**2 + fx**2)
    radius[0, 0] = 1.0
    amp = radius ** -rng.uniform(0.8, 1.2)
    amp[0, 0] = 0.0
    fields = []
    for _ in range(3):
        spec = amp * (rng.standard_normal(amp.shape) + 1j * rng.standard_normal(amp.shape))
        f = np.fft.irfft2(spec, s=(height, width))
        fields.append(f / (f.std() + 1e-12))
    mix = rng.normal(0.0, 0.35, (3, 3)) + np.eye(3) * 0.6 + 0.4
    img = np.tensordot(np.stack(fields, axis=-1), mix.T, axes=1)
    img = img / (np.abs(img).max() + 1e-12) * rng.uniform(60, 90) + rng.uniform(100, 150, size=3)

    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(2, 7))):
        color = rng.uniform(30, 220, size=3)
        alpha = rng.uniform(0.4, 0.9)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(0.05, 0.3) * min(height, width)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.3, 1.5))
        img[mask] = (1 - alpha) * img[mask] + alpha * color

    img += rng.normal(0.0, rng.uniform(0.5, 3.0), img.shape)
    return np.clip(np.floor(img + 0.5), 8, 247).astype(np.uint8)


def synthetic_sources(count: int, seed: int, size: int = 256, prefix: str = "synth") -> list[tuple[str, np.ndarray]]:
    """``count`` procedural images with ids ``{prefix}-{seed}-{i}``."""
    out = []
    for i in range(count):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, i, 0x51A7])))
        out.append((f"{prefix}-{seed}-{i}", synthetic_image(rng, size, size)))
    return out


def list_source_files(input_dir) -> list[Path]:
    exts = {".png", ".tif", ".tiff"}
    return sorted(p for p in Path(input_dir).iterdir() if p.suffix.lower() in exts and p.is_file())


def assign_split(source_id: str, seed: int, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> str:
    """Deterministically map a source to train/val/test by hashing its id.

    Every source lands in exactly one split, so the splits' source sets are
    disjoint by construction.
    """
    total = float(sum(fractions))
    if total <= 0 or any(f < 0 for f in fractions) or len(fractions) != 3:
        raise ValueError("fractions must be three non-negative numbers with positive sum")
    h = zlib.crc32(f"{seed}:{source_id}".encode()) / 2**32
    acc = 0.0
    for name, frac in zip(SPLITS, fractions):
        acc += frac / total
        if h < acc:
            return name
    return SPLITS[-1]


# ---------------------------------------------------------------- generation

def image_rng(seed: int, source_id: str, split: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, source, split)."""
    key = [int(seed) & 0xFFFFFFFF, int(seed) >> 32, zlib.crc32(source_id.encode()), SPLITS.index(split)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def generate_patches(img, manifest: DatasetManifest, rng: np.random.Generator, source_id: str = "") -> list[PatchRecord]:
    """Double-compress ``img`` once per ``qf1`` and sample labeled patches.

    One grid shift is drawn per (image, qf1); up to ``manifest.cap`` distinct
    top-left positions are drawn without replacement from all valid pixel
    offsets of the recompressed image.
    """
    img = crop_to_blocks(np.asarray(img, dtype=np.uint8))
    q2 = tables_for_qf(manifest.qf2)
    records = []
    for qf1 in manifest.qf1_grid:
        dx, dy = (int(v) for v in rng.integers(0, 8, size=2))
        shift = GridShift(dx, dy)
        out = double_compress(img, tables_for_qf(qf1), q2, shift)
        h, w = out.shape[:2]
        ny, nx = h - PATCH + 1, w - PATCH + 1
        if ny < 1 or nx < 1:
            raise SourceImageError(f"{source_id}: recompressed image {w}x{h} smaller than a patch")
        n = min(manifest.cap, ny * nx)
        picks = rng.choice(ny * nx, size=n, replace=False)
        label = QTarget.from_qf(qf1, manifest.nc)
        for p in picks:
            y, x = divmod(int(p), nx)
            records.append(
                PatchRecord(
                    pixels=np.ascontiguousarray(out[y:y + PATCH, x:x + PATCH]),
                    label=label,
                    qf1=qf1,
                    qf2=manifest.qf2,
                    shift=shift,
                    source_id=source_id,
                )
            )
    return records


def _generate_one(args):
    source_id, image, manifest = args
    if isinstance(image, (str, os.PathLike)):
        image = ingest_image(image)
    rng = image_rng(manifest.seed, source_id, manifest.split)
    return generate_patches(image, manifest, rng, source_id)


def generate_dataset(sources: Iterable, manifest: DatasetManifest, threads: int = 1) -> list[PatchRecord]:
    """Run :func:`generate_patches` over ``(source_id, image_or_path)`` pairs.

    Images are processed independently (in worker processes when
    ``threads > 1``); output order follows ``sources`` regardless.
    """
    jobs = [(sid, img, manifest) for sid, img in sources]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_generate_one, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        chunks = [_generate_one(j) for j in jobs]
    records = [r for chunk in chunks for r in chunk]
    log.info("generated %d records from %d sources (%s)", len(records), len(jobs), manifest.split)
    return records


# ---------------------------------------------------------------- shards

def write_shard(records: Sequence[PatchRecord], path) -> Path:
    """Serialize ``records`` to ``path``. Refuses an empty list."""
    if not records:
        raise ValueError("refusing to write an empty shard")
    first = records[0]
    ph, pw, pc = first.pixels.shape
    nc = first.label.nc
    path = Path(path)
    parts = [_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, ph, pw, pc, nc, len(records))]
    for r in records:
        if r.pixels.shape != (ph, pw, pc) or r.pixels.dtype != np.uint8:
            raise ValueError("all records must share patch shape and be uint8")
        if r.label.nc != nc:
            raise ValueError("all records must share the label length")
        sid = r.source_id.encode("utf-8")
        if len(sid) > 0xFFFF:
            raise ValueError("source_id too long")
        parts.append(_RECORD_HEAD.pack(r.qf1, r.qf2, r.shift.dx, r.shift.dy, len(sid)))
        parts.append(sid)
        parts.append(np.asarray(r.label.values, dtype="<u2").tobytes())
        parts.append(np.ascontiguousarray(r.pixels).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def read_shard_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _parse_header(raw, path)


def _parse_header(raw: bytes, path) -> dict:
    if len(raw) < _HEADER.size:
        raise ShardError(f"{path}: truncated header")
    magic, version, ph, pw, pc, nc, count = _HEADER.unpack_from(raw)
    if magic != SHARD_MAGIC:
        raise ShardError(f"{path}: bad magic {magic!r}")
    if version != SHARD_VERSION:
        raise ShardError(f"{path}: unsupported shard version {version}")
    if not 1 <= nc <= 64:
        raise ShardError(f"{path}: invalid nc {nc}")
    return {"patch_h": ph, "patch_w": pw, "channels": pc, "nc": nc, "count": count}


def read_shard(path) -> list[PatchRecord]:
    """Parse a shard, validating the header and the record count."""
    data = Path(path).read_bytes()
    hdr = _parse_header(data, path)
    ph, pw, pc, nc, count = hdr["patch_h"], hdr["patch_w"], hdr["channels"], hdr["nc"], hdr["count"]
    npix = ph * pw * pc
    off = _HEADER.size
    records = []
    for i in range(count):
        if off + _RECORD_HEAD.size > len(data):
            raise ShardError(f"{path}: truncated at record {i} of {count}")
        qf1, qf2, dx, dy, sid_len = _RECORD_HEAD.unpack_from(data, off)
        off += _RECORD_HEAD.size
        end = off + sid_len + 2 * nc + npix
        if end > len(data):
            raise ShardError(f"{path}: truncated at record {i} of {count}")
        sid = data[off:off + sid_len].decode("utf-8")
        off += sid_len
        label = np.frombuffer(data, dtype="<u2", count=nc, offset=off).astype(np.int64)
        off += 2 * nc
        pixels = np.frombuffer(data, dtype=np.uint8, count=npix, offset=off).reshape(ph, pw, pc).copy()
        off += npix
        try:
            shift = GridShift(dx, dy)
        except ValueError as exc:
            raise ShardError(f"{path}: record {i}: {exc}") from exc
        records.append(PatchRecord(pixels, QTarget(label), qf1, qf2, shift, sid))
    if off != len(data):
        raise ShardError(f"{path}: {len(data) - off} trailing bytes after {count} records")
    return records


@dataclass
class PatchArrays:
    """Columnar view of many records, convenient for batching."""

    pixels: np.ndarray  # (N, 64, 64, 3) uint8
    labels: np.ndarray  # (N, nc) int64
    qf1: np.ndarray
    qf2: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    source_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def nc(self) -> int:
        return self.labels.shape[1]

    @property
    def aligned(self) -> np.ndarray:
        return (self.dx == 0) & (self.dy == 0)

    def subset(self, idx) -> "PatchArrays":
        idx = np.asarray(idx)
        return PatchArrays(
            self.pixels[idx], self.labels[idx], self.qf1[idx], self.qf2[idx],
            self.dx[idx], self.dy[idx], [self.source_ids[i] for i in idx.tolist()],
        )

    @classmethod
    def from_records(cls, records: Sequence[PatchRecord]) -> "PatchArrays":
        if not records:
            raise ValueError("no records")
        return cls(
            pixels=np.stack([r.pixels for r in records]),
            labels=np.stack([r.label.values for r in records]).astype(np.int64),
            qf1=np.array([r.qf1 for r in records], dtype=np.int64),
            qf2=np.array([r.qf2 for r in records], dtype=np.int64),
            dx=np.array([r.shift.dx for r in records], dtype=np.int64),
            dy=np.array([r.shift.dy for r in records], dtype=np.int64),
            source_ids=[r.source_id for r in records],
        )


def load_patch_arrays(paths: Sequence) -> PatchArrays:
    """Read and concatenate shards; all must share ``nc`` and patch shape."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    records = []
    nc = None
    for p in paths:
        recs = read_shard(p)
        if recs:
            if nc is None:
                nc = recs[0].label.nc
            elif recs[0].label.nc != nc:
                raise ShardError(f"{p}: nc {recs[0].label.nc} differs from {nc}")
        records.extend(recs)
    return PatchArrays.from_records(records)
