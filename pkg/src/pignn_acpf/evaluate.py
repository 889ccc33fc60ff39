"""RMSE against Newton-Raphson references and the mode-by-aggregator-by-regime ablation table."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .batch import block_diag_batch
from .grid import BusType
from .model import EVAL_MODES, LsConfig, ModelParams, unroll
from .numerics import wrap_angle

GAP = "n/a"


@dataclass
class EvalResult:
    rmse_v: float  # p.u.
    rmse_theta: float  # degrees
    mode: str
    regime: str
    per_scenario_v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    per_scenario_theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    merit_initial: np.ndarray = field(default_factory=lambda: np.zeros(0))
    merit_final: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def merit_reduction(self) -> np.ndarray:
        return 1.0 - self.merit_final / np.maximum(self.merit_initial, np.finfo(float).tiny)

    def row(self) -> dict:
        return {"regime": self.regime, "mode": self.mode, "rmse_v_pu": self.rmse_v,
                "rmse_theta_deg": self.rmse_theta, "scenarios": self.per_scenario_v.size,
                "median_merit_reduction": float(np.median(self.merit_reduction)) if self.merit_initial.size else float("nan")}


def error_masks(types: np.ndarray, all_buses: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Buses counted in the V and theta errors: PQ and non-slack by default, everything with ``all_buses``."""
    types = np.asarray(types)
    if all_buses:
        everything = np.ones(types.shape, dtype=bool)
        return everything, everything
    return types == BusType.PQ, types != BusType.SLACK


def state_errors(v_pred, theta_pred, v_ref, theta_ref):
    """Voltage error in p.u. and wrapped angle error in radians."""
    return np.asarray(v_pred) - np.asarray(v_ref), wrap_angle(np.asarray(theta_pred) - np.asarray(theta_ref))


def rmse_from_predictions(scenarios, v_preds, theta_preds, mode: str = "", regime: str = "",
                          all_buses: bool = False) -> EvalResult:
    if len(scenarios) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    sq_v, sq_t, n_v, n_t = 0.0, 0.0, 0, 0
    per_v, per_t = [], []
    for s, v, th in zip(scenarios, v_preds, theta_preds):
        ev, et = state_errors(v, th, s.reference_state.v, s.reference_state.theta)
        mv, mt = error_masks(s.grid.types, all_buses)
        sv, st = float(np.sum(ev[mv] ** 2)), float(np.sum(et[mt] ** 2))
        sq_v += sv
        sq_t += st
        n_v += int(mv.sum())
        n_t += int(mt.sum())
        per_v.append(np.sqrt(sv / mv.sum()) if mv.any() else 0.0)
        per_t.append(np.degrees(np.sqrt(st / mt.sum())) if mt.any() else 0.0)
    rmse_v = float(np.sqrt(sq_v / n_v)) if n_v else 0.0
    rmse_t = float(np.degrees(np.sqrt(sq_t / n_t))) if n_t else 0.0
    return EvalResult(rmse_v, rmse_t, mode, regime, np.array(per_v), np.array(per_t))


def predict(params: ModelParams, scenarios, mode: str, K: int, ls_config: LsConfig | None = None,
            batch_size: int = 64):
    """Run the unroll in ``mode`` (short name or full mode) on every scenario; returns per-scenario arrays."""
    full = EVAL_MODES.get(mode, mode)
    v_out, t_out, f0, fk = [], [], [], []
    for start in range(0, len(scenarios), batch_size):
        chunk = scenarios[start:start + batch_size]
        graph = block_diag_batch(chunk)
        traj = unroll(graph, params, K, full, ls_config)
        v, th = traj.final_state()
        v_out.extend(graph.split(v))
        t_out.extend(graph.split(th))
        f0.append(traj.merits[0])
        fk.append(traj.merits[-1])
    return v_out, t_out, np.concatenate(f0), np.concatenate(fk)


def rmse_eval(params: ModelParams, scenarios, mode: str = "caps_ls", K: int = 10,
              ls_config: LsConfig | None = None, regime: str = "", all_buses: bool = False,
              batch_size: int = 64) -> EvalResult:
    if len(scenarios) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    v, th, f0, fk = predict(params, scenarios, mode, K, ls_config, batch_size)
    result = rmse_from_predictions(scenarios, v, th, mode, regime or scenarios[0].regime, all_buses)
    result.merit_initial, result.merit_final = f0, fk
    return result


ABLATION_MODES = ("base", "caps", "ls", "caps_ls")
ABLATION_KINDS = ("mlp", "attn")
ABLATION_REGIMES = ("HV", "MV", "HV+MV")


@dataclass
class AblationTable:
    """Rows (mode, kind); columns (regime, metric) with metric in {V, theta}."""

    cells: dict  # (mode, kind, regime) -> EvalResult | None

    def rows(self) -> list[dict]:
        out = []
        for mode in ABLATION_MODES:
            for kind in ABLATION_KINDS:
                row = {"mode": mode, "model": kind}
                for regime in ABLATION_REGIMES:
                    res = self.cells.get((mode, kind, regime))
                    row[f"{regime}_V"] = GAP if res is None else res.rmse_v
                    row[f"{regime}_theta"] = GAP if res is None else res.rmse_theta
                out.append(row)
        return out

    @property
    def shape(self) -> tuple[int, int]:
        rows = self.rows()
        return len(rows), len(rows[0]) - 2


def ablation_matrix(datasets: dict, models: dict, K: int = 10, ls_config: LsConfig | None = None,
                    all_buses: bool = False) -> AblationTable:
    """``datasets``: regime -> test scenarios; ``models``: (kind, regime) -> params. Missing pairs become gaps."""
    cells = {}
    for mode in ABLATION_MODES:
        for kind in ABLATION_KINDS:
            for regime in ABLATION_REGIMES:
                params, data = models.get((kind, regime)), datasets.get(regime)
                if params is None or not data:
                    cells[(mode, kind, regime)] = None
                    continue
                cells[(mode, kind, regime)] = rmse_eval(params, data, mode, K, ls_config, regime, all_buses)
    return AblationTable(cells)


def size_generalization(params: ModelParams, corpora: dict, mode: str = "caps_ls", K: int = 10,
                        ls_config: LsConfig | None = None) -> dict[int, EvalResult]:
    """Evaluate a frozen model on corpora keyed by grid size."""
    return {n: rmse_eval(params, data, mode, K, ls_config, batch_size=max(1, 4096 // max(n, 1)))
            for n, data in sorted(corpora.items())}


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
