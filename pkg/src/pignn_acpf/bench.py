"""Wall-clock harness: one scenario per size (single) and many scenarios per size (multi).

Every figure is the median over ``repeat`` timed cycles after ``warmup`` untimed ones;
the raw repeat timings are kept alongside.
"""
from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .batch import block_diag_batch, graph_arrays
from .grid import build_admittance
from .model import EVAL_MODES, ModelParams, unroll
from .numerics import nr_solve

SOLVERS = ("NR", "PIGNN-MLP", "PIGNN-Attn-LS")
WORKERS_ENV = "PIGNN_ACPF_WORKERS"


def default_workers() -> int:
    """Worker count: the environment override if set, else logical cores minus one (at least 1)."""
    env = os.environ.get(WORKERS_ENV)
    if env:
        value = int(env)
        if value < 1:
            raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {env!r}")
        return value
    return max(1, (os.cpu_count() or 1) - 1)


@dataclass
class BenchRecord:
    n: int
    solver: str
    regime: str  # "single" | "multi"
    scenarios: int
    workers: int
    micro_batch: int  # scenarios per inference batch (max over the stream)
    median_seconds: float
    repeats: list[float] = field(default_factory=list)

    @property
    def throughput(self) -> float:
        return self.scenarios / self.median_seconds if self.median_seconds > 0 else float("inf")

    def row(self) -> dict:
        out = asdict(self)
        out["repeats"] = ";".join(f"{t:.6e}" for t in self.repeats)
        out["throughput"] = self.throughput
        return out


def time_call(fn, warmup: int = 2, repeat: int = 5) -> list[float]:
    if repeat < 1 or warmup < 0:
        raise ValueError("need repeat >= 1 and warmup >= 0")
    for _ in range(warmup):
        fn()
    timings = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - start)
    return timings


def solve_nr(scenario):
    """Admittance assembly plus Newton-Raphson from the scenario's initial state."""
    return nr_solve(scenario.grid, build_admittance(scenario.grid), scenario.initial_state)


def solve_pignn(scenarios, params: ModelParams, mode: str, K: int, ls_config=None):
    """Pack ``scenarios`` into one graph and unroll; returns per-scenario (V, theta)."""
    graph = block_diag_batch(scenarios) if len(scenarios) > 1 else graph_arrays(
        scenarios[0].grid, scenarios[0].initial_state)
    traj = unroll(graph, params, K, EVAL_MODES.get(mode, mode), ls_config)
    v, th = traj.final_state()
    return list(zip(graph.split(v), graph.split(th)))


def _median_record(n, solver, regime, scenarios, workers, micro, timings) -> BenchRecord:
    return BenchRecord(n, solver, regime, scenarios, workers, micro, float(np.median(timings)), list(timings))


def bench_single(cases: dict, models: dict, K: int = 10, warmup: int = 2, repeat: int = 5,
                 ls_config=None) -> list[BenchRecord]:
    """``cases``: size -> scenario; ``models``: solver name -> (params, mode) for the PIGNN solvers."""
    records = []
    for n, scenario in sorted(cases.items()):
        with threadpool_limits(1):
            records.append(_median_record(n, "NR", "single", 1, 1, 1,
                                          time_call(lambda: solve_nr(scenario), warmup, repeat)))
            for solver, (params, mode) in models.items():
                timings = time_call(lambda: solve_pignn([scenario], params, mode, K, ls_config), warmup, repeat)
                records.append(_median_record(n, solver, "single", 1, 1, 1, timings))
    return records


# --- multi-scenario ---------------------------------------------------------------

_WORKER_SCENARIOS: list = []


def _nr_worker_init(scenarios):
    global _WORKER_SCENARIOS
    _WORKER_SCENARIOS = scenarios
    threadpool_limits(1)


def _nr_worker_chunk(indices):
    return [bool(solve_nr(_WORKER_SCENARIOS[i])[1].converged) for i in indices]


def nr_farm(scenarios, workers: int, pool=None) -> list[bool]:
    """Solve every scenario with NR; one task per scenario, chunked across ``workers`` processes."""
    if workers <= 1 or pool is None:
        with threadpool_limits(1):
            return [bool(solve_nr(s)[1].converged) for s in scenarios]
    chunks = np.array_split(np.arange(len(scenarios)), workers * 4)
    out = []
    for part in pool.map(_nr_worker_chunk, [c.tolist() for c in chunks if c.size]):
        out.extend(part)
    return out


def pack_micro_batches(sizes, node_budget: int) -> list[list[int]]:
    """Greedy first-fit by descending node count under a total-node budget; returns index bins."""
    sizes = np.asarray(sizes, dtype=int)
    if sizes.size == 0:
        return []
    if node_budget < sizes.max():
        raise ValueError(f"node budget {node_budget} is smaller than one scenario ({sizes.max()} buses)")
    order = sorted(range(sizes.size), key=lambda i: (-sizes[i], i))
    bins, loads = [], []
    for i in order:
        for b, load in enumerate(loads):
            if load + sizes[i] <= node_budget:
                bins[b].append(i)
                loads[b] += sizes[i]
                break
        else:
            bins.append([i])
            loads.append(int(sizes[i]))
    return [sorted(b) for b in bins]


def stream_pignn(scenarios, params: ModelParams, mode: str, K: int, bins, ls_config=None):
    """Run every micro-batch in sequence; returns per-scenario (V, theta) in input order."""
    out = [None] * len(scenarios)
    for b in bins:
        for i, state in zip(b, solve_pignn([scenarios[i] for i in b], params, mode, K, ls_config)):
            out[i] = state
    return out


def bench_multi(corpora: dict, models: dict, workers: int | None = None, node_budget: int = 2048,
                K: int = 10, warmup: int = 2, repeat: int = 5, ls_config=None,
                include_batch1: bool = True, include_nr: bool = True) -> list[BenchRecord]:
    """``corpora``: size -> scenarios. NR runs on a process farm; PIGNN streams micro-batches.

    With ``include_batch1`` each PIGNN solver is also timed one scenario per batch
    (recorded with ``micro_batch = 1``). ``include_nr=False`` skips the NR farm.
    """
    workers = default_workers() if workers is None else workers
    records = []
    for n, scenarios in sorted(corpora.items()):
        sizes = [s.grid.n for s in scenarios]
        bins = pack_micro_batches(sizes, node_budget)
        micro = max(len(b) for b in bins)
        if include_nr and workers > 1:
            with ProcessPoolExecutor(workers, initializer=_nr_worker_init, initargs=(scenarios,)) as pool:
                timings = time_call(lambda: nr_farm(scenarios, workers, pool), warmup, repeat)
        elif include_nr:
            timings = time_call(lambda: nr_farm(scenarios, 1), warmup, repeat)
        if include_nr:
            records.append(_median_record(n, "NR", "multi", len(scenarios), workers, 1, timings))
        with threadpool_limits(1):
            for solver, (params, mode) in models.items():
                timings = time_call(lambda: stream_pignn(scenarios, params, mode, K, bins, ls_config), warmup, repeat)
                records.append(_median_record(n, solver, "multi", len(scenarios), 1, micro, timings))
                if include_batch1:
                    singles = [[i] for i in range(len(scenarios))]
                    timings = time_call(lambda: stream_pignn(scenarios, params, mode, K, singles, ls_config),
                                        warmup, repeat)
                    records.append(_median_record(n, solver, "multi", len(scenarios), 1, 1, timings))
    return records


def loglog_slope(sizes, seconds) -> float:
    """Least-squares slope of log(time) against log(size)."""
    sizes, seconds = np.asarray(sizes, dtype=float), np.asarray(seconds, dtype=float)
    if sizes.size < 2:
        raise ValueError("need at least two sizes for a slope")
    return float(np.polyfit(np.log(sizes), np.log(seconds), 1)[0])


def slopes_by_solver(records: list[BenchRecord], regime: str = "single") -> dict[str, float]:
    out = {}
    for solver in sorted({r.solver for r in records if r.regime == regime}):
        rows = sorted((r.n, r.median_seconds / r.scenarios) for r in records
                      if r.regime == regime and r.solver == solver and r.micro_batch >= 1)
        if len(rows) >= 2:
            out[solver] = loglog_slope([n for n, _ in rows], [t for _, t in rows])
    return out


def write_records(path, records: list[BenchRecord]) -> None:
    if not records:
        raise ValueError("no benchmark records to write")
    rows = [r.row() for r in records]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def long_format(records: list[BenchRecord]) -> list[dict]:
    """Plot-ready rows: n, solver, regime, median_seconds."""
    return [{"n": r.n, "solver": r.solver if r.micro_batch != 1 or r.regime == "single" or r.solver == "NR"
             else f"{r.solver} (batch-1)", "regime": r.regime, "median_seconds": r.median_seconds}
            for r in records]
