import json

import numpy as np
import pytest

from pignn_acpf import io
from pignn_acpf.model import LsConfig, ModelConfig, ModelParams
from pignn_acpf.train import TrainConfig, evaluate_loss, _batches
from pignn_acpf.batch import block_diag_batch


def _same_scenario(a, b):
    assert a.grid == b.grid
    for x, y in ((a.initial_state, b.initial_state), (a.reference_state, b.reference_state)):
        assert np.array_equal(x.v, y.v) and np.array_equal(x.theta, y.theta)
    assert a.nr_report.merit_trail == b.nr_report.merit_trail
    assert (a.seed, a.regime, a.index, a.attempt, a.lengths_km) == (b.seed, b.regime, b.index, b.attempt, b.lengths_km)


def test_dataset_round_trip_bit_exact(tmp_path, hv_small, mv_small):
    path = io.write_dataset(tmp_path / "d.jsonl", hv_small + mv_small)
    back = io.read_dataset(path)
    assert len(back) == len(hv_small) + len(mv_small)
    for a, b in zip(hv_small + mv_small, back):
        _same_scenario(a, b)
        assert io.dumps_scenario(a) == io.dumps_scenario(b)


def test_every_line_parses_alone(tmp_path, hv_small):
    path = io.write_dataset(tmp_path / "d.jsonl", hv_small[:3])
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        assert rec["schema"] == io.DATASET_SCHEMA
        io.record_to_scenario(rec)


def test_schema_and_convergence_checked(tmp_path, hv_small):
    rec = io.scenario_to_record(hv_small[0])
    with pytest.raises(io.SchemaError):
        io.record_to_scenario(dict(rec, schema=99))
    bad = dict(rec, nr=dict(rec["nr"], converged=False))
    with pytest.raises(io.SchemaError):
        io.record_to_scenario(bad)
    path = tmp_path / "broken.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(io.SchemaError, match="broken.jsonl:1"):
        io.read_dataset(path)


def test_splits_stable_and_balanced(tmp_path, hv_small):
    names = [io.split_of(i) for i in range(3000)]
    counts = {s: names.count(s) for s in io.SPLITS}
    assert all(900 <= c <= 1100 for c in counts.values())
    assert names == [io.split_of(i) for i in range(3000)]
    paths = io.write_splits(tmp_path, hv_small, "hv")
    assert sorted(p.name for p in paths.values()) == ["hv_test.jsonl", "hv_train.jsonl", "hv_val.jsonl"]
    assert sum(len(io.read_dataset(p)) for p in paths.values()) == len(hv_small)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    for cfg in (ModelConfig(kind="attn"), ModelConfig(kind="mlp", share_weights=True)):
        params = ModelParams.init(cfg, seed=7)
        ls = LsConfig(alpha_min=0.1)
        path = io.save_checkpoint(tmp_path / f"{cfg.kind}.npz", params, ls, {"note": 1})
        back, ls_back, header = io.load_checkpoint(path)
        assert back.config == cfg and ls_back == ls and header["extra"] == {"note": 1}
        assert header["kind"] == cfg.kind and header["d_model"] == 16 and header["heads"] == 4
        for name, t in params.tensors.items():
            assert np.array_equal(back[name].data, t.data)


def test_checkpoint_reproduces_validation_loss(tmp_path, hv_small):
    params = ModelParams.init(ModelConfig(steps=3), seed=2)
    cfg = TrainConfig(K=3)
    graphs = [block_diag_batch(b) for b in _batches(hv_small, 8)]
    before = evaluate_loss(params, graphs, cfg)
    back, _, _ = io.load_checkpoint(io.save_checkpoint(tmp_path / "c.npz", params))
    assert evaluate_loss(back, graphs, cfg) == before


def test_checkpoint_mismatch_rejected(tmp_path):
    params = ModelParams.init(ModelConfig(steps=2), seed=0)
    path = io.save_checkpoint(tmp_path / "c.npz", params)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    header = json.loads(str(arrays["__header__"]))
    header["schema"] = 2
    arrays["__header__"] = np.array(json.dumps(header))
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(io.SchemaError, match="schema"):
        io.load_checkpoint(tmp_path / "bad.npz")
    header["schema"] = io.CHECKPOINT_SCHEMA
    arrays["__header__"] = np.array(json.dumps(header))
    arrays.pop("param:step0.upd.0.W")
    np.savez(tmp_path / "missing.npz", **arrays)
    with pytest.raises(io.SchemaError, match="architecture"):
        io.load_checkpoint(tmp_path / "missing.npz")
