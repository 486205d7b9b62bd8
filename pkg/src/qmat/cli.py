"""Command-line entry point: ``qmat generate | train | estimate | evaluate``.

Exit status is 0 on success, 2 for bad flags or values, 1 when the work
itself fails. Verbosity comes from ``QMAT_LOG`` (quiet, info or debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

log = logging.getLogger("qmat")

LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Invalid flag values; reported with exit status 2."""


def _qf(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"quality factor must be an integer, got {text!r}") from None
    if not 1 <= v <= 100:
        raise argparse.ArgumentTypeError(f"quality factor must be in [1, 100], got {v}")
    return v


def _qf_list(text: str) -> tuple[int, ...]:
    items = [s for s in text.replace(" ", "").split(",") if s]
    if not items:
        raise argparse.ArgumentTypeError("empty quality factor list")
    return tuple(_qf(s) for s in items)


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _non_negative(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmat", description="Primary JPEG quantization matrix estimation.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("generate", help="synthesize double-compressed patch shards")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--input-dir", type=Path, help="directory of lossless PNG/TIFF sources")
    src.add_argument("--synthetic", type=_positive, metavar="N", help="use N procedural source images")
    g.add_argument("--image-size", type=_positive, default=256, help="side of synthetic images (default 256)")
    g.add_argument("--split", choices=("train", "val", "test"), default="train")
    g.add_argument("--partition", action="store_true",
                   help="keep only sources whose id hashes into --split (disjoint splits)")
    g.add_argument("--qf2", type=_qf, required=True)
    g.add_argument("--qf1-grid", type=_qf_list, help="comma-separated QF1 values")
    g.add_argument("--cap", type=_positive, help="patches per (image, qf1); default 100, 5 for test")
    g.add_argument("--nc", type=_positive, default=15)
    g.add_argument("--seed", type=_seed, default=0)
    g.add_argument("--out", type=Path, required=True, help="shard file (.qmds) or output directory")
    g.add_argument("--threads", type=_positive, default=1)

    t = sub.add_parser("train", help="train or fine-tune the dense regressor")
    t.add_argument("shards", nargs="+", type=Path)
    t.add_argument("--val", nargs="*", type=Path, default=[])
    t.add_argument("--out", type=Path, required=True, help="checkpoint path, rewritten every epoch")
    t.add_argument("--epochs", type=_non_negative, default=1)
    t.add_argument("--batch-size", type=_positive, default=32)
    t.add_argument("--lr", type=_positive_float, default=1e-5)
    t.add_argument("--loss", choices=("logcosh", "l2"), default="logcosh")
    t.add_argument("--seed", type=_seed, default=0)
    t.add_argument("--bn-recalibration", type=_non_negative, default=64, metavar="BATCHES",
                   help="batches used to re-estimate BN statistics after training (0: keep running averages)")
    t.add_argument("--warm-start", type=Path, help="start from this checkpoint's weights")
    t.add_argument("--resume", action="store_true",
                   help="with --warm-start, also restore optimizer state and epoch count")
    t.add_argument("--small", action="store_true", help="desk-scale preset: depth 16, growth rate 8")
    t.add_argument("--depth", type=_positive)
    t.add_argument("--growth-rate", type=_positive)
    t.add_argument("--blocks", type=_positive)
    t.add_argument("--dropout", type=float)
    t.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    t.add_argument("--threads", type=_positive, default=None, help="cap BLAS threads")

    e = sub.add_parser("estimate", help="estimate the leading steps for one 64x64 patch")
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--patch", type=Path, required=True, help="64x64 PNG patch")

    v = sub.add_parser("evaluate", help="evaluate a checkpoint on test shards")
    v.add_argument("shards", nargs="+", type=Path)
    v.add_argument("--model", type=Path, required=True)
    v.add_argument("--out-dir", type=Path, help="write eval.csv, per_coeff.csv and per_coeff.svg here")
    v.add_argument("--no-align-split", action="store_true", help="pool aligned and non-aligned patches")
    v.add_argument("--train-qf2", type=_qf, help="annotate the QF2 the model was trained at")
    v.add_argument("--batch-size", type=_positive, default=32)
    v.add_argument("--threads", type=_positive, default=1)
    return p


def _blas_limit(threads: int | None):
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads, user_api="blas")


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    from qmat import dataset as ds

    grid = args.qf1_grid
    if grid is None:
        defaults = {90: ds.QF1_GRID_QF2_90, 80: ds.QF1_GRID_QF2_80}
        if args.qf2 not in defaults:
            raise UsageError(f"--qf1-grid is required when --qf2 is {args.qf2} (defaults exist for 80 and 90)")
        grid = defaults[args.qf2]
    kw = {}
    if args.cap is not None:
        kw["patches_per_image_test" if args.split == "test" else "patches_per_image_cap"] = args.cap
    try:
        manifest = ds.DatasetManifest(split=args.split, qf2=args.qf2, qf1_grid=grid, seed=args.seed,
                                      nc=args.nc, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    if args.synthetic is not None:
        if args.image_size < ds.MIN_SIDE:
            raise UsageError(f"--image-size must be at least {ds.MIN_SIDE}")
        sources = ds.synthetic_sources(args.synthetic, args.seed, args.image_size)
    else:
        if not args.input_dir.is_dir():
            raise UsageError(f"--input-dir {args.input_dir} is not a directory")
        sources = [(p.name, p) for p in ds.list_source_files(args.input_dir)]
        if not sources:
            raise RuntimeError(f"no PNG/TIFF files in {args.input_dir}")
    if args.partition:
        sources = [(sid, img) for sid, img in sources if ds.assign_split(sid, args.seed) == args.split]
        if not sources:
            raise RuntimeError(f"no sources hash into split {args.split!r}")

    records = ds.generate_dataset(sources, manifest, threads=args.threads)
    out = args.out
    if out.suffix != ".qmds":
        out = out / f"{args.split}.qmds"
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.write_shard(records, out)
    aligned = sum(r.aligned for r in records)
    print(f"{out}\t{len(records)} records from {len(sources)} sources ({aligned} aligned)")
    return 0


def _architecture(args):
    from qmat.tensor_nn import DenseNetConfig

    kw = {}
    if args.depth is not None:
        kw["depth"] = args.depth
    if args.growth_rate is not None:
        kw["growth_rate"] = args.growth_rate
    if args.blocks is not None:
        kw["num_blocks"] = args.blocks
    if args.dropout is not None:
        kw["dropout_rate"] = args.dropout
    try:
        return DenseNetConfig.small(**kw) if args.small else DenseNetConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    from qmat.dataset import load_patch_arrays
    from qmat.tensor_nn import DenseNetModel, TrainConfig, load_checkpoint, train

    if args.resume and args.warm_start is None:
        raise UsageError("--resume needs --warm-start")
    arch_flags = args.small or any(getattr(args, n) is not None for n in ("depth", "growth_rate", "blocks", "dropout"))
    if args.warm_start is not None and arch_flags:
        raise UsageError("architecture flags cannot be combined with --warm-start")
    try:
        config = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                             loss=args.loss, seed=args.seed,
                             bn_recalibration_batches=args.bn_recalibration)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    data = load_patch_arrays(args.shards)
    val = load_patch_arrays(args.val) if args.val else None
    optimizer, start_epoch = None, 0
    if args.warm_start is not None:
        model, info = load_checkpoint(args.warm_start)
        if args.resume:
            optimizer, start_epoch = info["optimizer"], info["epoch"]
        log.info("warm start from %s (epoch %d)", args.warm_start, info["epoch"])
    else:
        model = DenseNetModel.init(_architecture(args), seed=args.seed, dtype=np.dtype(args.dtype))
    qf2 = sorted({int(q) for q in data.qf2})
    meta = {"qf2": qf2[0] if len(qf2) == 1 else None, "train_records": len(data),
            "warm_start": str(args.warm_start) if args.warm_start else None}
    with _blas_limit(args.threads):
        model, hist = train(model, data, config, val_data=val, checkpoint_path=args.out,
                            optimizer=optimizer, start_epoch=start_epoch, meta=meta)
    if args.epochs == 0:
        from qmat.tensor_nn import save_checkpoint

        save_checkpoint(args.out, model, start_epoch, optimizer, meta)
    last = f"train {args.loss} {hist.train_loss[-1]:.6f}" if hist.train_loss else "no epochs run"
    if hist.val_loss:
        last += f", val {hist.val_loss[-1]:.6f}"
    print(f"{args.out}\t{hist.steps} steps, {last}")
    return 0


def read_patch_png(path) -> np.ndarray:
    from PIL import Image

    from qmat.dataset import CHANNELS, PATCH

    with Image.open(path) as im:
        if im.format not in ("PNG", "TIFF"):
            raise ValueError(f"{path}: expected a lossless PNG patch, got {im.format}")
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            a = np.asarray(im, dtype=np.float64)
            a = np.clip(np.floor(a / 257.0 + 0.5), 0, 255).astype(np.uint8)
        else:
            a = np.asarray(im.convert("L") if im.mode in ("L", "LA", "1") else im.convert("RGB"))
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], CHANNELS, axis=2)
    if a.shape != (PATCH, PATCH, CHANNELS):
        raise ValueError(f"{path}: patch must be {PATCH}x{PATCH}, got {a.shape[1]}x{a.shape[0]}")
    return np.ascontiguousarray(a, dtype=np.uint8)


def cmd_estimate(args) -> int:
    from qmat.estimator import estimate
    from qmat.tensor_nn import load_checkpoint

    model, _ = load_checkpoint(args.model)
    est = estimate(model, read_patch_png(args.patch))
    print(" ".join(str(int(v)) for v in est.rounded))
    print("raw: " + " ".join(f"{v:.4f}" for v in est.raw))
    return 0


def cmd_evaluate(args) -> int:
    from qmat.harness import ExperimentConfig, evaluate

    cfg = ExperimentConfig(model_checkpoint=args.model, test_shards=tuple(args.shards),
                           align_split=not args.no_align_split, output_dir=args.out_dir,
                           batch_size=args.batch_size, threads=args.threads)
    with _blas_limit(args.threads):
        table = evaluate(cfg)
    if args.train_qf2 is not None:
        table.qf2_train = args.train_qf2
    tag = f"qf2 train {table.qf2_train if table.qf2_train is not None else '?'}, test {','.join(map(str, table.qf2_test))}"
    print(f"# {tag}")
    print(f"{'qf1':>4} {'alignment':<12} {'mse':>10} {'acc':>8} {'n':>7}")
    for qf1, alignment, mse, acc, n in table.rows():
        print(f"{qf1:>4} {alignment:<12} {mse:>10.6f} {acc:>8.6f} {n:>7}")
    mse, acc, n = table.pooled()
    print(f"{'all':>4} {'pooled':<12} {mse:>10.6f} {acc:>8.6f} {n:>7}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "estimate": cmd_estimate, "evaluate": cmd_evaluate}


def _setup_logging() -> None:
    level_name = os.environ.get("QMAT_LOG", "info").strip().lower() or "info"
    if level_name not in LOG_LEVELS:
        raise UsageError(f"QMAT_LOG must be one of {', '.join(LOG_LEVELS)}, got {level_name!r}")
    root = logging.getLogger("qmat")
    root.setLevel(LOG_LEVELS[level_name])
    if not root.handlers:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(h)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        _setup_logging()
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"qmat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # runtime failures become exit status 1 with a message
        log.debug("failure", exc_info=True)
        print(f"qmat {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
