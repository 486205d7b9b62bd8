import xml.etree.ElementTree as ET

import numpy as np
import pytest

from qmat.dataset import PatchArrays, PatchRecord, write_shard
from qmat.harness import (
    ALIGNED,
    NON_ALIGNED,
    EvalTable,
    ExperimentConfig,
    constant_predictor,
    emit_outputs,
    eval_csv,
    evaluate,
    evaluate_records,
    median_label,
    mismatch_eval,
)
from qmat.jpeg_core import GridShift, QTarget
from qmat.tensor_nn import DenseNetConfig, DenseNetModel, save_checkpoint

GRID = (60, 75, 95)


def make_arrays(n=600, grid=GRID, seed=0, qf2=90, nc=15):
    rng = np.random.default_rng(seed)
    qf1 = rng.choice(grid, n)
    dx = rng.integers(0, 8, n)
    dy = rng.integers(0, 8, n)
    dx[: n // 10] = 0
    dy[: n // 10] = 0
    labels = np.stack([QTarget.from_qf(int(q), nc).values for q in qf1])
    return PatchArrays(
        pixels=rng.integers(0, 256, (n, 64, 64, 3), dtype=np.uint8),
        labels=labels, qf1=qf1, qf2=np.full(n, qf2), dx=dx, dy=dy,
        source_ids=[f"s{i // 5}" for i in range(n)],
    )


def oracle_for(arrays):
    """Predictor that looks the truth up by pixel content."""
    table = {arrays.pixels[i].tobytes(): arrays.labels[i] for i in range(len(arrays))}
    return lambda px: np.stack([table[p.tobytes()] for p in px]).astype(float)


def test_oracle_predictor_is_perfect():
    arr = make_arrays()
    table = evaluate_records(arr, oracle_for(arr))
    for qf1, alignment, mse, acc, n in table.rows():
        assert (mse, acc) == (0.0, 1.0)
        assert n > 0
    assert table.total == len(arr)


def test_rows_partition_by_alignment():
    arr = make_arrays()
    table = evaluate_records(arr, oracle_for(arr))
    for q in GRID:
        sel = arr.qf1 == q
        assert table.row(q, ALIGNED)[2] == int((sel & arr.aligned).sum())
        assert table.row(q, NON_ALIGNED)[2] == int((sel & ~arr.aligned).sum())
    assert sum(r[4] for r in table.rows()) == len(arr)
    pooled = evaluate_records(arr, oracle_for(arr), align_split=False)
    assert [r[1] for r in pooled.rows()] == ["all"] * len(GRID)


def test_median_constant_predictor():
    arr = make_arrays(seed=1)
    med = median_label(arr.labels)
    table = evaluate_records(arr, constant_predictor(med))
    rounded = np.maximum(np.floor(med + 0.5), 1)
    direct = (arr.labels == rounded).mean()
    assert table.pooled()[1] == pytest.approx(direct, abs=1e-12)
    # these three tables differ in every leading coefficient, so the pooled Acc
    # is also the fraction of patches whose whole label equals the median
    whole = np.all(arr.labels == rounded, axis=1).mean()
    assert table.pooled()[1] == pytest.approx(whole, abs=1e-12)
    mse_direct = ((arr.labels - rounded) ** 2).mean()
    assert table.pooled()[0] == pytest.approx(mse_direct, abs=1e-9)


def test_constant_label_model_mismatch():
    arr = make_arrays(seed=2, qf2=92)
    c = QTarget.from_qf(75).values
    table = evaluate_records(arr, constant_predictor(c))
    assert table.pooled()[1] == pytest.approx((arr.labels == c).mean(), abs=1e-12)
    assert table.qf2_test == (92,)


def noisy_predictor(seed):
    rng = np.random.default_rng(seed)
    cache = {}

    def predict(px):
        out = []
        for p in px:
            key = p.tobytes()
            if key not in cache:
                cache[key] = rng.normal(8, 5, 15)
            out.append(cache[key])
        return np.stack(out)

    return predict


def test_split_merge_equals_union():
    arr = make_arrays(n=500, seed=3)
    pred = noisy_predictor(0)
    full = evaluate_records(arr, pred)
    idx = np.random.default_rng(4).permutation(len(arr))
    a = evaluate_records(arr.subset(idx[:180]), pred)
    b = evaluate_records(arr.subset(idx[180:]), pred)
    merged = a.merge(b)
    assert merged.keys() == full.keys()
    for ra, rb in zip(merged.rows(), full.rows()):
        assert ra[0:2] == rb[0:2] and ra[4] == rb[4]
        assert abs(ra[2] - rb[2]) < 1e-9 and abs(ra[3] - rb[3]) < 1e-9
    np.testing.assert_allclose(merged.per_coefficient_accuracy(), full.per_coefficient_accuracy(), atol=1e-12)


def test_order_invariance_and_threads():
    arr = make_arrays(n=300, seed=5)
    pred = noisy_predictor(1)
    base = evaluate_records(arr, pred, chunk=64)
    perm = np.random.default_rng(6).permutation(len(arr))
    shuffled = evaluate_records(arr.subset(perm), pred, chunk=64, threads=3)
    for ra, rb in zip(base.rows(), shuffled.rows()):
        assert ra[0:2] == rb[0:2] and ra[4] == rb[4]
        assert abs(ra[2] - rb[2]) < 1e-9 and abs(ra[3] - rb[3]) < 1e-9


def test_merge_rejects_nc_mismatch():
    with pytest.raises(ValueError):
        EvalTable(15).merge(EvalTable(10))


def test_predictor_shape_checked():
    arr = make_arrays(n=20)
    with pytest.raises(ValueError):
        evaluate_records(arr, lambda px: np.zeros((len(px), 14)))


# ---------------------------------------------------------------- outputs

def two_row_table():
    t = EvalTable(3)
    t.add([60, 60, 60], [ALIGNED, NON_ALIGNED, NON_ALIGNED], [0.0, 1.0, 2.0], [1.0, 0.5, 0.0],
          [[1, 1, 1], [1, 0, 1], [0, 0, 0]])
    return t


def test_eval_csv_two_rows(tmp_path):
    files = emit_outputs(two_row_table(), tmp_path)
    lines = files["eval"].read_text().splitlines()
    assert lines == [
        "qf1,alignment,mse,acc,n",
        "60,aligned,0.000000,1.000000,1",
        "60,non-aligned,1.500000,0.250000,2",
    ]


def test_re_emission_is_byte_identical(tmp_path):
    arr = make_arrays(n=200, seed=7)
    table = evaluate_records(arr, noisy_predictor(2))
    a = emit_outputs(table, tmp_path / "a")
    b = emit_outputs(table, tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()


def test_per_coeff_csv_rows(tmp_path):
    arr = make_arrays(n=100, seed=8)
    files = emit_outputs(evaluate_records(arr, noisy_predictor(3)), tmp_path)
    lines = files["per_coeff"].read_text().splitlines()
    assert lines[0] == "coefficient,acc"
    assert len(lines) - 1 == 15
    assert [int(l.split(",")[0]) for l in lines[1:]] == list(range(1, 16))


def test_plot_is_valid_svg(tmp_path):
    files = emit_outputs(two_row_table(), tmp_path)
    root = ET.parse(files["plot"]).getroot()
    assert root.tag.endswith("svg")
    assert any(el.tag.endswith("polyline") for el in root.iter())


def test_emit_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_outputs(EvalTable(15), tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_outputs(two_row_table(), blocker)


# ---------------------------------------------------------------- checkpoint-driven runs

def records_from(arr):
    return [
        PatchRecord(arr.pixels[i], QTarget(arr.labels[i]), int(arr.qf1[i]), int(arr.qf2[i]),
                    GridShift(int(arr.dx[i]), int(arr.dy[i])), arr.source_ids[i])
        for i in range(len(arr))
    ]


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    d = tmp_path_factory.mktemp("ck")
    model = DenseNetModel.init(DenseNetConfig(num_blocks=2, growth_rate=4, layers_per_block=2), seed=0)
    return save_checkpoint(d / "m.ckpt", model, meta={"qf2": 90})


def test_evaluate_from_files(tmp_path, checkpoint):
    arr = make_arrays(n=40, seed=9)
    shard = write_shard(records_from(arr), tmp_path / "t.qmds")
    cfg = ExperimentConfig(model_checkpoint=checkpoint, test_shards=[shard], output_dir=tmp_path / "out")
    table = evaluate(cfg)
    assert table.total == 40
    assert table.qf2_train == 90 and table.qf2_test == (90,)
    assert (tmp_path / "out" / "eval.csv").read_text() == eval_csv(table)
    same = mismatch_eval(ExperimentConfig(model_checkpoint=checkpoint, test_shards=[shard]))
    assert same.rows() == table.rows()


def test_mismatch_annotation(tmp_path, checkpoint):
    arr = make_arrays(n=20, seed=10, qf2=92)
    shard = write_shard(records_from(arr), tmp_path / "m.qmds")
    table = mismatch_eval(ExperimentConfig(model_checkpoint=checkpoint, test_shards=[shard]), train_qf2=90)
    assert (table.qf2_train, table.qf2_test) == (90, (92,))


def test_evaluate_errors(tmp_path, checkpoint):
    arr = make_arrays(n=10, seed=11, nc=10)
    shard = write_shard(records_from(arr), tmp_path / "n.qmds")
    with pytest.raises(ValueError, match="steps"):
        evaluate(ExperimentConfig(model_checkpoint=checkpoint, test_shards=[shard]))
    with pytest.raises(FileNotFoundError):
        evaluate(ExperimentConfig(model_checkpoint=tmp_path / "missing.ckpt", test_shards=[shard]))
    with pytest.raises(ValueError):
        ExperimentConfig(model_checkpoint=checkpoint, test_shards=[])
    with pytest.raises(ValueError):
        ExperimentConfig(model_checkpoint=checkpoint, test_shards=[shard], group_by="image")
