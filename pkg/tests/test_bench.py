import json

import pytest

from ossnet.bench import (BenchResult, activation_bytes, compare_inference, compare_sampling,
                          memory_sweep, sweep_max_batch)
from ossnet.model import init_params
from ossnet.train import TrainConfig
from ossnet.volume import phantom_dataset


@pytest.fixture(scope="module")
def data16():
    return phantom_dataset(3, 16, seed=11, blob_radius_range=(2.0, 5.0))


def test_sweep_records_every_value_and_method(tiny, data16):
    params = init_params(tiny("C"))
    vols = [v for v, _ in data16[:2]]
    result = sweep_max_batch(params, vols, [2 ** 6, 2 ** 10, 2 ** 14], init_res=4, target_res=16)
    assert result.summary["invariant"]
    assert len(result.records) == 2 * 3 * 2
    for rec in result.records:
        assert rec.peak_batch <= rec.value
    counts = {(r.volume, r.method): set() for r in result.records}
    for r in result.records:
        counts[(r.volume, r.method)].add(r.eval_count)
    assert all(len(c) == 1 for c in counts.values())


def test_sweep_without_aux_runs_mise_only(tiny, data16):
    result = sweep_max_batch(init_params(tiny("A")), [data16[0][0]], [64, 128], 4, 16)
    assert {r.method for r in result.records} == {"mise"}


def test_compare_inference_summary(tiny, data16):
    params = init_params(tiny("C"))
    vols = [v for v, _ in data16]
    labels = [m for _, m in data16]
    result = compare_inference(params, vols, labels, init_res=4, target_res=16)
    s = result.summary
    for key in ("speed_ratio", "eval_ratio", "max_disagreement", "seed_iou", "speed_gate"):
        assert key in s
    assert 0 <= s["max_disagreement"] <= 1
    assert len(result.select(method="seeded")) == 3
    assert json.loads(result.to_json())["name"] == "inference"


def test_compare_sampling_best_of(tiny, data16):
    configs = [(s, n) for s in ("uniform", "border") for n in (32, 64, 128)]
    base = TrainConfig(epochs=1, batch_volumes=2, n_val=256, band_width=2)
    result = compare_sampling(configs, data16[:2], data16[2:], [0, 1, 2], base, tiny("onet"))
    table = result.summary["table"].splitlines()
    assert len(table) == 1 + 6
    assert all(len(row.split()) == 4 for row in table[1:])
    for strategy, n in configs:
        label = f"{strategy} {n}"
        runs = [r.dice for r in result.select(value=label, method=strategy)]
        best = result.select(value=label, method=f"{strategy}/best")[0].dice
        assert len(runs) == 3 and best >= max(runs) and best in runs
    assert result.best_of == 3


def test_activation_bytes_monotone(tiny):
    cfg = tiny("C")
    sizes = [activation_bytes(cfg, n, (16, 16, 16)) for n in (16, 64, 256)]
    assert sizes[0] < sizes[1] < sizes[2]
    result = memory_sweep(cfg, [16, 64], (16, 16, 16))
    assert [r.extra["bytes"] for r in result.records] == sizes[:2]


def test_table_renders_used_columns():
    result = BenchResult("demo", "x", [1])
    assert result.table().splitlines()[0].split() == ["value", "method", "seed", "volume",
                                                      "eval_count", "peak_batch",
                                                      "disagreement", "iou", "dice", "wall_ms"]
    from ossnet.bench import BenchRecord

    result.records.append(BenchRecord(1, "m", eval_count=5))
    header = result.table().splitlines()[0].split()
    assert header == ["value", "method", "eval_count"]
