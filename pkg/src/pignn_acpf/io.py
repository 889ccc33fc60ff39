"""Dataset, checkpoint and split file formats.

Datasets are JSON Lines, one self-describing scenario per line. Floats are
written with ``repr`` precision, so parsing gives back the exact same bits.
NR wall time is not stored, which keeps files byte-identical across runs.
Checkpoints are ``.npz`` archives holding every parameter array plus a JSON header.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .grid import Bus, BusType, Grid, Line
from .model import LsConfig, ModelConfig, ModelParams
from .autodiff import Tensor
from .numerics import NrReport, State
from .synth import Scenario

DATASET_SCHEMA = 1
CHECKPOINT_SCHEMA = 1
FEATURE_LAYOUT = ["V", "theta", "dP", "dQ", "m"]
SPLITS = ("train", "val", "test")


class SchemaError(ValueError):
    pass


# --- scenarios ---------------------------------------------------------------------

def scenario_to_record(s: Scenario) -> dict:
    g = s.grid
    return {
        "schema": DATASET_SCHEMA,
        "regime": s.regime,
        "seed": s.seed,
        "index": s.index,
        "attempt": s.attempt,
        "v_base": g.v_base,
        "s_base": g.s_base,
        "buses": [[int(b.kind), b.p_set, b.q_set, b.v_set, b.theta_set] for b in g.buses],
        "lines": [[ln.from_bus, ln.to_bus, ln.r_series, ln.x_series, ln.b_shunt_total] for ln in g.lines],
        "lengths_km": list(s.lengths_km),
        "initial": {"v": s.initial_state.v.tolist(), "theta": s.initial_state.theta.tolist()},
        "reference": {"v": s.reference_state.v.tolist(), "theta": s.reference_state.theta.tolist()},
        "nr": {
            "converged": s.nr_report.converged,
            "iterations": s.nr_report.iterations,
            "final_merit": s.nr_report.final_merit,
            "reason": s.nr_report.reason,
            "merit_trail": list(s.nr_report.merit_trail),
        },
    }


def record_to_scenario(rec: dict) -> Scenario:
    if rec.get("schema") != DATASET_SCHEMA:
        raise SchemaError(f"dataset schema {rec.get('schema')!r} is not supported (expected {DATASET_SCHEMA})")
    buses = [Bus(i, BusType(int(b[0])), b[1], b[2], b[3], b[4]) for i, b in enumerate(rec["buses"])]
    lines = [Line(int(a), int(b), r, x, sh) for a, b, r, x, sh in rec["lines"]]
    grid = Grid(buses, lines, rec["v_base"], rec["s_base"], rec["regime"])
    nr = rec["nr"]
    if not nr["converged"]:
        raise SchemaError(f"scenario {rec['index']} is stored without a converged reference")
    report = NrReport(True, nr["iterations"], nr["final_merit"], 0.0, nr["reason"], list(nr["merit_trail"]))
    return Scenario(
        grid,
        State(rec["initial"]["v"], rec["initial"]["theta"]),
        State(rec["reference"]["v"], rec["reference"]["theta"]),
        report, rec["seed"], rec["regime"], rec["index"], rec["attempt"], tuple(rec["lengths_km"]),
    )


def dumps_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_record(s), separators=(",", ":"), allow_nan=False)


def write_dataset(path, scenarios) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in scenarios:
            fh.write(dumps_scenario(s))
            fh.write("\n")
    return path


def read_dataset(path) -> list[Scenario]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(record_to_scenario(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise SchemaError(f"{path}:{lineno}: malformed scenario record ({exc})") from None
    return out


def split_of(index: int) -> str:
    """Stable 1:1:1 assignment from the SHA-256 of the scenario index."""
    digest = hashlib.sha256(str(int(index)).encode()).digest()
    return SPLITS[int.from_bytes(digest[:8], "big") % 3]


def split_scenarios(scenarios) -> dict[str, list[Scenario]]:
    out = {name: [] for name in SPLITS}
    for s in scenarios:
        out[split_of(s.index)].append(s)
    return out


def write_splits(out_dir, scenarios, stem: str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return {name: write_dataset(out_dir / f"{stem}_{name}.jsonl", part)
            for name, part in split_scenarios(scenarios).items()}


def read_many(paths) -> list[Scenario]:
    out = []
    for p in paths:
        out.extend(read_dataset(p))
    return out


# --- checkpoints ----------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, ls_config: LsConfig | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "kind": params.config.kind,
        "d_model": params.config.hidden,
        "heads": params.config.heads,
        "layers": params.config.layers,
        "feature_layout": FEATURE_LAYOUT,
        "model_config": asdict(params.config),
        "ls_config": asdict(ls_config or LsConfig()),
        "extra": extra or {},
    }
    arrays = {f"param:{name}": t.data for name, t in params.tensors.items()}
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    os.replace(tmp, path)
    return path


def _dataclass_from(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise SchemaError(f"unknown {cls.__name__} fields in checkpoint: {sorted(unknown)}")
    return cls(**values)


def load_checkpoint(path) -> tuple[ModelParams, LsConfig, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("schema") != CHECKPOINT_SCHEMA:
            raise SchemaError(f"checkpoint schema {header.get('schema')!r} is not supported "
                              f"(expected {CHECKPOINT_SCHEMA})")
        if header.get("feature_layout") != FEATURE_LAYOUT:
            raise SchemaError(f"checkpoint feature layout {header.get('feature_layout')} does not match {FEATURE_LAYOUT}")
        config = _dataclass_from(ModelConfig, header["model_config"])
        tensors = {key[len("param:"):]: Tensor(data[key].copy(), requires_grad=True, name=key[len("param:"):])
                   for key in data.files if key.startswith("param:")}
    expected = ModelParams.init(config, seed=0)
    missing = set(expected.tensors) ^ set(tensors)
    if missing:
        raise SchemaError(f"checkpoint parameters do not match the architecture: {sorted(missing)}")
    for name, t in expected.tensors.items():
        if tensors[name].shape != t.shape:
            raise SchemaError(f"parameter {name} has shape {tensors[name].shape}, expected {t.shape}")
    params = ModelParams(config, {name: tensors[name] for name in expected.tensors})
    return params, _dataclass_from(LsConfig, header["ls_config"]), header
