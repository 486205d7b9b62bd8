"""Evaluation protocol: per-QF1 MSE/Acc split by grid alignment, QF2
mismatch runs, per-coefficient accuracy, and CSV/SVG reporting.

Tables keep running sums rather than means so that tables computed on
disjoint shard sets merge exactly.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from qmat.dataset import PatchArrays, load_patch_arrays
from qmat.estimator import EVAL_BATCH, metrics_arrays, predict_raw, round_steps
from qmat.tensor_nn.checkpoint import load_checkpoint

log = logging.getLogger(__name__)

ALIGNED = "aligned"
NON_ALIGNED = "non-aligned"
ALL = "all"


@dataclass
class _Cell:
    n: int
    mse_sum: float
    acc_sum: float
    hits: np.ndarray  # per-coefficient exact-match counts

    def merged(self, other: "_Cell") -> "_Cell":
        return _Cell(self.n + other.n, self.mse_sum + other.mse_sum, self.acc_sum + other.acc_sum,
                     self.hits + other.hits)


@dataclass
class EvalTable:
    """Aggregated metrics keyed by ``(qf1, alignment)``.

    ``alignment`` is ``"aligned"``/``"non-aligned"``, or ``"all"`` when the
    alignment split is off. ``qf2_train``/``qf2_test`` annotate mismatch runs.
    """

    nc: int
    cells: dict = field(default_factory=dict)
    qf2_train: int | None = None
    qf2_test: tuple = ()

    def add(self, qf1, alignment, mse, acc, correct):
        """Accumulate patches: ``mse``/``acc`` per patch, ``correct`` (N, nc) booleans."""
        qf1 = np.asarray(qf1)
        alignment = np.asarray(alignment)
        mse = np.asarray(mse, dtype=np.float64)
        acc = np.asarray(acc, dtype=np.float64)
        correct = np.asarray(correct, dtype=bool).reshape(len(mse), self.nc)
        for key in sorted({(int(q), str(a)) for q, a in zip(qf1, alignment)}):
            sel = (qf1 == key[0]) & (alignment == key[1])
            cell = _Cell(int(sel.sum()), float(mse[sel].sum()), float(acc[sel].sum()),
                         correct[sel].sum(axis=0).astype(np.int64))
            self.cells[key] = self.cells[key].merged(cell) if key in self.cells else cell
        return self

    def merge(self, other: "EvalTable") -> "EvalTable":
        """Count-weighted union of two tables."""
        if other.nc != self.nc:
            raise ValueError(f"cannot merge tables with nc {self.nc} and {other.nc}")
        out = EvalTable(self.nc, dict(self.cells), self.qf2_train,
                        tuple(sorted(set(self.qf2_test) | set(other.qf2_test))))
        if out.qf2_train is None:
            out.qf2_train = other.qf2_train
        for key, cell in other.cells.items():
            out.cells[key] = out.cells[key].merged(cell) if key in out.cells else cell
        return out

    @property
    def total(self) -> int:
        return sum(c.n for c in self.cells.values())

    def keys(self) -> list:
        order = {ALIGNED: 0, NON_ALIGNED: 1, ALL: 2}
        return sorted(self.cells, key=lambda k: (k[0], order.get(k[1], 3)))

    def rows(self) -> list[tuple]:
        """``(qf1, alignment, mean mse, mean acc, n)`` sorted by qf1, aligned first."""
        out = []
        for key in self.keys():
            c = self.cells[key]
            out.append((key[0], key[1], c.mse_sum / c.n, c.acc_sum / c.n, c.n))
        return out

    def row(self, qf1: int, alignment: str) -> tuple[float, float, int]:
        c = self.cells[(int(qf1), alignment)]
        return c.mse_sum / c.n, c.acc_sum / c.n, c.n

    def pooled(self) -> tuple[float, float, int]:
        """Mean MSE and Acc over every patch in the table."""
        n = self.total
        if n == 0:
            raise ValueError("empty table")
        return (sum(c.mse_sum for c in self.cells.values()) / n,
                sum(c.acc_sum for c in self.cells.values()) / n, n)

    def per_coefficient_accuracy(self) -> np.ndarray:
        n = self.total
        if n == 0:
            raise ValueError("empty table")
        return sum(c.hits for c in self.cells.values()) / n


@dataclass(frozen=True)
class ExperimentConfig:
    model_checkpoint: str | os.PathLike
    test_shards: Sequence
    group_by: str = "qf1"
    align_split: bool = True
    output_dir: str | os.PathLike | None = None
    batch_size: int = EVAL_BATCH
    threads: int = 1

    def __post_init__(self):
        if self.group_by != "qf1":
            raise ValueError("only group_by='qf1' is supported")
        if isinstance(self.test_shards, (str, os.PathLike)):
            object.__setattr__(self, "test_shards", (self.test_shards,))
        if not self.test_shards:
            raise ValueError("no test shards given")
        if self.batch_size < 1 or self.threads < 1:
            raise ValueError("batch_size and threads must be >= 1")


def _chunks(n: int, parts: int) -> list[np.ndarray]:
    parts = max(1, min(parts, n))
    return [c for c in np.array_split(np.arange(n), parts) if len(c)]


def evaluate_records(arrays: PatchArrays, predict_fn: Callable, align_split: bool = True,
                     threads: int = 1, chunk: int = 256) -> EvalTable:
    """Aggregate metrics of ``predict_fn`` (pixels ``(N,64,64,3)`` -> raw ``(N,nc)``).

    Chunks may be predicted concurrently; they are merged in index order so
    the result does not depend on scheduling.
    """
    if len(arrays) == 0:
        raise ValueError("no patches to evaluate")
    pieces = [np.arange(lo, min(lo + chunk, len(arrays))) for lo in range(0, len(arrays), chunk)]

    def run(idx):
        raw = np.asarray(predict_fn(arrays.pixels[idx]), dtype=np.float64)
        if raw.shape != (len(idx), arrays.nc):
            raise ValueError(f"predictor returned shape {raw.shape}, expected {(len(idx), arrays.nc)}")
        return round_steps(raw)

    if threads > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rounded = list(pool.map(run, pieces))
    else:
        rounded = [run(idx) for idx in pieces]
    rounded = np.concatenate(rounded)
    mse, acc = metrics_arrays(rounded, arrays.labels)
    if align_split:
        alignment = np.where(arrays.aligned, ALIGNED, NON_ALIGNED)
    else:
        alignment = np.full(len(arrays), ALL)
    table = EvalTable(arrays.nc, qf2_test=tuple(sorted({int(q) for q in arrays.qf2})))
    return table.add(arrays.qf1, alignment, mse, acc, rounded == arrays.labels)


def evaluate(config: ExperimentConfig, arrays: PatchArrays | None = None) -> EvalTable:
    """Run the checkpointed model over every test patch and aggregate."""
    model, info = load_checkpoint(config.model_checkpoint)
    arrays = arrays if arrays is not None else load_patch_arrays(list(config.test_shards))
    if arrays.nc != model.config.nc_outputs:
        raise ValueError(f"checkpoint predicts {model.config.nc_outputs} steps but shards carry {arrays.nc}")
    table = evaluate_records(arrays, lambda px: predict_raw(model, px, config.batch_size),
                             config.align_split, config.threads)
    qf2 = info.get("meta", {}).get("qf2")
    table.qf2_train = int(qf2) if qf2 is not None else None
    log.info("evaluated %d patches in %d cells", table.total, len(table.cells))
    if config.output_dir is not None:
        emit_outputs(table, config.output_dir)
    return table


def mismatch_eval(config: ExperimentConfig, train_qf2: int | None = None) -> EvalTable:
    """Evaluate a model on shards recompressed at a possibly different QF2.

    The aggregation is the same as :func:`evaluate`; the table is annotated
    with the training QF2 (from the argument or the checkpoint metadata) and
    the QF2 values present in the shards.
    """
    table = evaluate(config)
    if train_qf2 is not None:
        table.qf2_train = int(train_qf2)
    return table


def median_label(labels) -> np.ndarray:
    """Elementwise median of a label set (the constant-predictor baseline)."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or len(labels) == 0:
        raise ValueError("labels must be a non-empty (N, nc) array")
    return np.median(labels, axis=0)


def constant_predictor(vector) -> Callable:
    vector = np.asarray(vector, dtype=np.float64).reshape(-1)
    return lambda px: np.broadcast_to(vector, (len(px), vector.size))


# ---------------------------------------------------------------- outputs

def _fmt(v: float) -> str:
    return f"{v:.6f}"


def eval_csv(table: EvalTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["qf1", "alignment", "mse", "acc", "n"])
    for qf1, alignment, mse, acc, n in table.rows():
        w.writerow([qf1, alignment, _fmt(mse), _fmt(acc), n])
    return buf.getvalue()


def per_coeff_csv(table: EvalTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["coefficient", "acc"])
    for i, a in enumerate(table.per_coefficient_accuracy(), start=1):
        w.writerow([i, _fmt(a)])
    return buf.getvalue()


def per_coeff_svg(acc: Sequence[float], width: int = 480, height: int = 300) -> str:
    """Line plot of per-coefficient accuracy as a small standalone SVG."""
    acc = [float(a) for a in acc]
    left, right, top, bottom = 50, 15, 20, 40
    pw, ph = width - left - right, height - top - bottom
    nc = len(acc)

    def px(i):
        return left + (pw * i / (nc - 1) if nc > 1 else pw / 2)

    def py(a):
        return top + ph * (1.0 - a)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in range(6):
        a = t / 5
        y = py(a)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">{a:.1f}</text>')
    for i in range(nc):
        out.append(f'<text x="{px(i):.2f}" y="{top + ph + 16}" text-anchor="middle">{i + 1}</text>')
    pts = " ".join(f"{px(i):.2f},{py(a):.2f}" for i, a in enumerate(acc))
    out.append(f'<polyline points="{pts}" fill="none" stroke="#1f5fa8" stroke-width="2"/>')
    for i, a in enumerate(acc):
        out.append(f'<circle cx="{px(i):.2f}" cy="{py(a):.2f}" r="3" fill="#1f5fa8"/>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 6}" text-anchor="middle">coefficient (zig-zag index)</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2})">accuracy</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_outputs(table: EvalTable, out_dir) -> dict[str, Path]:
    """Write ``eval.csv``, ``per_coeff.csv`` and ``per_coeff.svg`` into ``out_dir``."""
    if table.total == 0:
        raise ValueError("refusing to emit an empty table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "eval": (out_dir / "eval.csv", eval_csv(table)),
        "per_coeff": (out_dir / "per_coeff.csv", per_coeff_csv(table)),
        "plot": (out_dir / "per_coeff.svg", per_coeff_svg(table.per_coefficient_accuracy())),
    }
    for path, text in files.values():
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return {k: p for k, (p, _) in files.items()}
