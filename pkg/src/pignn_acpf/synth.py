"""Synthetic MV/HV grids, operating points, Newton-Raphson references and outlier filtering."""
from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import (
    BusType,
    EngineeringBus,
    EngineeringGrid,
    EngineeringLine,
    Grid,
    GridError,
    build_admittance,
    to_per_unit,
    validate_grid,
)
from .numerics import NR_MAX_ITER, NR_TOL, NrReport, State, nr_solve

log = logging.getLogger(__name__)

MAX_DRAWS = 50
PV_PROBABILITY = 0.2
EXTRA_EDGE_FRACTION = 0.2
INIT_V_RANGE = (0.9, 1.1)


@dataclass(frozen=True)
class RegimeRanges:
    name: str
    v_base: float  # V
    s_base: float  # VA
    length_km: tuple[float, float]
    r_per_km: tuple[float, float]  # ohm/km
    x_per_km: tuple[float, float]  # ohm/km
    c_per_km: tuple[float, float]  # nF/km
    p_range: tuple[float, float]  # MW
    q_range: tuple[float, float]  # MVAr
    load_reference_n: float = 4.0

    def loading_ceiling(self, n: int) -> float:
        """Upper bound of the per-scenario loading level for an ``n``-bus grid."""
        return min(1.0, float(np.sqrt(self.load_reference_n / max(n, 1))))


MV = RegimeRanges(
    "MV", 10e3, 10e6,
    length_km=(1.0, 20.0), r_per_km=(0.5, 0.6), x_per_km=(0.3, 0.35), c_per_km=(8.0, 14.0),
    p_range=(-5.0, 5.0), q_range=(-2.0, 2.0), load_reference_n=1.0,
)
HV = RegimeRanges(
    "HV", 110e3, 100e6,
    length_km=(1.0, 50.0), r_per_km=(0.15, 0.2), x_per_km=(0.35, 0.45), c_per_km=(8.0, 10.0),
    p_range=(-300.0, 300.0), q_range=(-150.0, 150.0), load_reference_n=4.0,
)
REGIMES = {"MV": MV, "HV": HV}


def regime_ranges(regime) -> RegimeRanges:
    if isinstance(regime, RegimeRanges):
        return regime
    try:
        return REGIMES[str(regime).upper()]
    except KeyError:
        raise ValueError(f"unknown regime {regime!r}; expected one of {sorted(REGIMES)}") from None


@dataclass
class Scenario:
    grid: Grid
    initial_state: State
    reference_state: State
    nr_report: NrReport
    seed: int
    regime: str
    index: int = 0
    attempt: int = 0
    lengths_km: tuple[float, ...] = ()


@dataclass
class Rejection:
    reason: str
    detail: str = ""


@dataclass
class SynthesisReport:
    regime: str
    requested: int
    accepted: int = 0
    draws: int = 0
    rejections: Counter = field(default_factory=Counter)
    failed_indices: list[int] = field(default_factory=list)
    iqr_dropped: int = 0
    fences: tuple[float, float] | None = None
    nr_seconds: float = 0.0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.draws if self.draws else 0.0

    def as_dict(self) -> dict:
        return {
            "regime": self.regime,
            "requested": self.requested,
            "accepted": self.accepted,
            "draws": self.draws,
            "acceptance_rate": self.acceptance_rate,
            "rejections": dict(self.rejections),
            "failed_indices": list(self.failed_indices),
            "iqr_dropped": self.iqr_dropped,
            "fences": list(self.fences) if self.fences else None,
            "nr_seconds": self.nr_seconds,
        }


def sample_topology(n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Uniform random spanning tree (Pruefer sequence) plus floor(0.2 n) extra chords."""
    if n < 2:
        return []
    if n == 2:
        edges = [(0, 1)]
    else:
        seq = rng.integers(0, n, size=n - 2)
        degree = np.ones(n, dtype=np.int64)
        np.add.at(degree, seq, 1)
        edges = []
        for node in seq:
            leaf = int(np.flatnonzero(degree == 1)[0])
            edges.append((min(leaf, int(node)), max(leaf, int(node))))
            degree[leaf] -= 1
            degree[node] -= 1
        u, w = np.flatnonzero(degree == 1)
        edges.append((int(u), int(w)))

    extra = min(int(np.floor(EXTRA_EDGE_FRACTION * n)), n * (n - 1) // 2 - (n - 1))
    present = set(edges)
    while extra > 0:
        a, b = (int(k) for k in rng.integers(0, n, size=2))
        key = (min(a, b), max(a, b))
        if a != b and key not in present:
            present.add(key)
            edges.append(key)
            extra -= 1
    return edges


def assign_bus_types(n: int, rng: np.random.Generator, pv_probability: float = PV_PROBABILITY) -> list[BusType]:
    if n < 1:
        return []
    draws = rng.random(n - 1)
    return [BusType.SLACK] + [BusType.PV if u < pv_probability else BusType.PQ for u in draws]


def sample_operating_point(regime, types, rng: np.random.Generator, loading: float = 1.0) -> list[EngineeringBus]:
    """Setpoints in engineering units; the initial state follows from them (see ``State.flat``).

    P and Q are uniform on ``loading`` times the regime's range, so every draw
    stays inside the table ranges for ``loading <= 1``.
    """
    ranges = regime_ranges(regime)
    buses = []
    for i, kind in enumerate(types):
        p = loading * rng.uniform(*ranges.p_range)
        q = loading * rng.uniform(*ranges.q_range)
        v = rng.uniform(*INIT_V_RANGE)
        if kind == BusType.SLACK:
            buses.append(EngineeringBus(i, kind, 0.0, 0.0, v))
        elif kind == BusType.PV:
            buses.append(EngineeringBus(i, kind, p, 0.0, v))
        else:
            buses.append(EngineeringBus(i, kind, p, q, 1.0))
    return buses


def sample_loading(regime, n: int, rng: np.random.Generator, profile: str = "scaled") -> float:
    """Per-scenario loading level: U(0, ceiling(n)) for ``scaled``, 1 for ``literal``."""
    if profile == "literal":
        return 1.0
    if profile != "scaled":
        raise ValueError(f"unknown load profile {profile!r}")
    return float(rng.uniform(0.0, regime_ranges(regime).loading_ceiling(n)))


def sample_engineering_grid(regime, n: int, rng: np.random.Generator, load_profile: str = "scaled") -> EngineeringGrid:
    ranges = regime_ranges(regime)
    loading = sample_loading(ranges, n, rng, load_profile)
    edges = sample_topology(n, rng)
    types = assign_bus_types(n, rng)
    lines = tuple(
        EngineeringLine(
            a, b,
            length_km=rng.uniform(*ranges.length_km),
            r_ohm_per_km=rng.uniform(*ranges.r_per_km),
            x_ohm_per_km=rng.uniform(*ranges.x_per_km),
            c_nf_per_km=rng.uniform(*ranges.c_per_km),
        )
        for a, b in edges
    )
    buses = tuple(sample_operating_point(ranges, types, rng, loading))
    return EngineeringGrid(buses, lines, ranges.v_base, ranges.s_base, ranges.name)


def synthesize_scenario(regime, n: int, rng: np.random.Generator, *, seed: int = 0, index: int = 0,
                        attempt: int = 0, tol: float = NR_TOL, max_iter: int = NR_MAX_ITER,
                        load_profile: str = "scaled"):
    """One draw: returns a :class:`Scenario` if NR converges, else a :class:`Rejection`."""
    ranges = regime_ranges(regime)
    if n < 2:
        return Rejection("degenerate", f"n={n}")
    eng = sample_engineering_grid(ranges, n, rng, load_profile)
    grid = to_per_unit(eng)
    report = validate_grid(grid)
    if not report.connected:
        return Rejection("disconnected")
    if not report.valid:
        return Rejection("degenerate", "; ".join(report.problems))
    try:
        Y = build_admittance(grid)
    except GridError as exc:
        return Rejection("degenerate", str(exc))
    state0 = State.flat(grid)
    reference, nr_report = nr_solve(grid, Y, state0, tol, max_iter)
    if not nr_report.converged:
        return Rejection("non-convergent", nr_report.reason)
    return Scenario(grid, state0, reference, nr_report, seed, ranges.name, index, attempt,
                    tuple(ln.length_km for ln in eng.lines))


def scenario_size(seed: int, index: int, n_min: int, n_max: int) -> int:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    return int(rng.integers(n_min, n_max + 1))


@dataclass(frozen=True)
class _Task:
    regime: str
    seed: int
    index: int
    n_min: int
    n_max: int
    max_draws: int
    load_profile: str


def _synthesize_index(task: _Task):
    n = scenario_size(task.seed, task.index, task.n_min, task.n_max)
    reasons = []
    nr_seconds = 0.0
    for attempt in range(task.max_draws):
        rng = np.random.default_rng(np.random.SeedSequence([task.seed, task.index, attempt]))
        result = synthesize_scenario(task.regime, n, rng, seed=task.seed, index=task.index, attempt=attempt,
                                     load_profile=task.load_profile)
        if isinstance(result, Scenario):
            nr_seconds += result.nr_report.wall_time
            return result, reasons, nr_seconds
        reasons.append(result.reason)
    return None, reasons, nr_seconds


def synthesize_corpus(regime, count: int, seed: int, n_min: int = 4, n_max: int = 32, *,
                      start_index: int = 0, workers: int = 1, max_draws: int = MAX_DRAWS,
                      load_profile: str = "scaled", report: SynthesisReport | None = None) -> tuple[list[Scenario], SynthesisReport]:
    """Synthesize scenarios ``start_index .. start_index+count-1``.

    Each index owns the random streams ``SeedSequence([seed, index, ...])``, so
    serial and parallel runs give identical corpora.
    """
    ranges = regime_ranges(regime)
    report = report or SynthesisReport(ranges.name, count)
    tasks = [_Task(ranges.name, seed, i, n_min, n_max, max_draws, load_profile)
             for i in range(start_index, start_index + count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_synthesize_index, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        results = [_synthesize_index(t) for t in tasks]

    scenarios = []
    for task, (scenario, reasons, nr_seconds) in zip(tasks, results):
        report.draws += len(reasons) + (scenario is not None)
        report.rejections.update(reasons)
        report.nr_seconds += nr_seconds
        if scenario is None:
            report.failed_indices.append(task.index)
        else:
            report.accepted += 1
            scenarios.append(scenario)
    return scenarios, report


# --- Tukey filter -----------------------------------------------------------

def tukey_fences(values, k: float = 1.5) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("cannot compute fences of an empty sample")
    q1, q3 = np.quantile(values, [0.25, 0.75], method="linear")
    iqr = q3 - q1
    return float(q1 - k * iqr), float(q3 + k * iqr)


def iqr_filter(scenarios, fences: tuple[float, float] | None = None):
    """Drop every scenario with a reference voltage magnitude outside the Tukey fences.

    Fences are pooled over all buses of all scenarios unless given explicitly.
    Returns ``(kept, dropped, fences)``.
    """
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("iqr_filter needs a non-empty corpus")
    if fences is None:
        fences = tukey_fences(np.concatenate([s.reference_state.v for s in scenarios]))
    lo, hi = fences
    kept, dropped = [], []
    for s in scenarios:
        v = s.reference_state.v
        (kept if np.all((v >= lo) & (v <= hi)) else dropped).append(s)
    return kept, dropped, fences


def line_parameters_in_range(scenario: Scenario, rel_tol: float = 1e-9) -> bool:
    """Check the per-km line parameters recovered from p.u. against the regime's ranges."""
    from .grid import to_engineering

    ranges = regime_ranges(scenario.regime)
    eng = to_engineering(scenario.grid, scenario.lengths_km)

    def inside(value, bounds):
        lo, hi = bounds
        slack = rel_tol * max(abs(lo), abs(hi))
        return lo - slack <= value <= hi + slack

    for ln in eng.lines:
        if not (inside(ln.length_km, ranges.length_km) and inside(ln.r_ohm_per_km, ranges.r_per_km)
                and inside(ln.x_ohm_per_km, ranges.x_per_km) and inside(ln.c_nf_per_km, ranges.c_per_km)):
            return False
    s_mva = ranges.s_base / 1e6
    for bus in scenario.grid.buses:
        if not (inside(bus.p_set * s_mva, ranges.p_range) and inside(bus.q_set * s_mva, ranges.q_range)):
            return False
    return True


def rx_ratios(scenarios) -> np.ndarray:
    return np.concatenate([s.grid.line_array[:, 2] / s.grid.line_array[:, 3] for s in scenarios])
