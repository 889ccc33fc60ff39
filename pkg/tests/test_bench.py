import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from threadpoolctl import threadpool_limits

from pignn_acpf import bench, synth
from pignn_acpf.model import ModelConfig, ModelParams


@pytest.fixture(scope="module")
def models():
    return {"PIGNN-MLP": (ModelParams.init(ModelConfig(kind="mlp"), seed=0), "base"),
            "PIGNN-Attn-LS": (ModelParams.init(ModelConfig(kind="attn"), seed=0), "caps_ls")}


def test_default_workers(monkeypatch):
    monkeypatch.setenv(bench.WORKERS_ENV, "3")
    assert bench.default_workers() == 3
    monkeypatch.setenv(bench.WORKERS_ENV, "0")
    with pytest.raises(ValueError):
        bench.default_workers()
    monkeypatch.delenv(bench.WORKERS_ENV)
    assert bench.default_workers() >= 1


def test_time_call_protocol():
    calls = []
    timings = bench.time_call(lambda: calls.append(1), warmup=2, repeat=5)
    assert len(calls) == 7 and len(timings) == 5 and all(t >= 0 for t in timings)
    with pytest.raises(ValueError):
        bench.time_call(lambda: None, repeat=0)


def test_pack_micro_batches_examples():
    assert bench.pack_micro_batches([5, 3, 4, 2], 7) == [[0, 3], [1, 2]]
    assert bench.pack_micro_batches([4, 4, 4], 4) == [[0], [1], [2]]
    with pytest.raises(ValueError, match="smaller than one scenario"):
        bench.pack_micro_batches([8, 3], 7)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=40), st.integers(50, 200))
def test_pack_micro_batches_properties(sizes, budget):
    bins = bench.pack_micro_batches(sizes, budget)
    flat = sorted(i for b in bins for i in b)
    assert flat == list(range(len(sizes)))
    assert all(sum(sizes[i] for i in b) <= budget for b in bins)


def test_bench_single_records(models):
    cases = {n: synth.synthesize_corpus("HV", 1, seed=n, n_min=n, n_max=n)[0][0] for n in (8, 16)}
    records = bench.bench_single(cases, models, K=2, warmup=1, repeat=5)
    assert len(records) == 2 * 3
    for r in records:
        assert r.median_seconds > 0 and len(r.repeats) == 5
        assert r.median_seconds == pytest.approx(float(np.median(r.repeats)))


def test_streaming_matches_serial_states(models, hv_small):
    params, mode = models["PIGNN-Attn-LS"]
    bins = bench.pack_micro_batches([s.grid.n for s in hv_small], 40)
    streamed = bench.stream_pignn(hv_small, params, mode, 3, bins)
    singles = bench.stream_pignn(hv_small, params, mode, 3, [[i] for i in range(len(hv_small))])
    for (va, ta), (vb, tb) in zip(streamed, singles):
        assert np.allclose(va, vb, rtol=0, atol=1e-13) and np.allclose(ta, tb, rtol=0, atol=1e-13)


def test_single_scenario_budget_degenerates_to_batch_one(hv_small):
    sizes = [s.grid.n for s in hv_small]
    bins = bench.pack_micro_batches(sizes, max(sizes))
    assert all(len(b) == 1 or sum(sizes[i] for i in b) <= max(sizes) for b in bins)
    uniform = [s for s in hv_small if s.grid.n == sizes[0]]
    assert bench.pack_micro_batches([s.grid.n for s in uniform], sizes[0]) == [[i] for i in range(len(uniform))]


def test_farm_with_one_worker_matches_serial_nr():
    corpus, _ = synth.synthesize_corpus("HV", 48, seed=5, n_min=48, n_max=48)
    farm, serial = [], []
    # interleaved rounds and fastest repeats: machine noise only ever adds time
    for _ in range(3):
        farm += bench.bench_multi({48: corpus}, {}, workers=1, warmup=1, repeat=5)[0].repeats
        with threadpool_limits(1):
            serial += bench.time_call(lambda: [bench.solve_nr(s) for s in corpus], 1, 5)
    assert abs(min(farm) - min(serial)) <= 0.2 * min(serial)


def test_bench_multi_harness_contract(models):
    sizes = (4, 8, 16, 32, 64, 128)
    corpora = {n: synth.synthesize_corpus("HV", 256, seed=n, n_min=n, n_max=n)[0] for n in sizes}
    assert all(len(c) == 256 for c in corpora.values())
    records = bench.bench_multi(corpora, models, workers=1, node_budget=4096, K=2, warmup=0, repeat=1)
    keys = [(r.n, r.solver, r.micro_batch == 1) for r in records]
    assert len(keys) == len(set(keys))
    for n in sizes:
        assert {r.solver for r in records if r.n == n} == set(bench.SOLVERS)
        assert sum(1 for r in records if r.n == n and r.solver != "NR" and r.micro_batch > 1) == 2


def test_bench_multi_without_nr(models, hv_small):
    records = bench.bench_multi({4: hv_small[:8]}, models, workers=1, K=2, warmup=0, repeat=1, include_nr=False)
    assert "NR" not in {r.solver for r in records} and len(records) == 4


def test_loglog_slope():
    assert bench.loglog_slope([1, 2, 4, 8], [1, 8, 64, 512]) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        bench.loglog_slope([4], [1.0])


def test_write_records_and_long_format(tmp_path):
    recs = [bench.BenchRecord(64, "NR", "single", 1, 1, 1, 0.5, [0.5] * 5),
            bench.BenchRecord(64, "PIGNN-MLP", "multi", 10, 1, 1, 0.2, [0.2] * 5),
            bench.BenchRecord(64, "PIGNN-MLP", "multi", 10, 1, 5, 0.1, [0.1] * 5)]
    path = tmp_path / "bench.csv"
    bench.write_records(path, recs)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 3 and float(rows[2]["throughput"]) == pytest.approx(100.0)
    long = bench.long_format(recs)
    assert [r["solver"] for r in long] == ["NR", "PIGNN-MLP (batch-1)", "PIGNN-MLP"]
    assert set(long[0]) == {"n", "solver", "regime", "median_seconds"}
