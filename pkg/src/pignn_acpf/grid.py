"""Static network description, per-unit conversion and nodal admittance assembly."""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SYSTEM_FREQUENCY_HZ = 50.0


class GridError(ValueError):
    """Raised when a grid cannot be turned into a well-posed power-flow problem."""


class BusType(enum.IntEnum):
    SLACK = 0
    PV = 1
    PQ = 2


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusType
    p_set: float = 0.0
    q_set: float = 0.0
    v_set: float = 1.0
    theta_set: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r_series: float
    x_series: float
    b_shunt_total: float = 0.0


@dataclass(frozen=True)
class Grid:
    """A grid in per-unit quantities.

    ``buses[i].id`` must equal ``i``; lines reference buses by index.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    v_base: float = 1.0
    s_base: float = 1.0
    regime: str = "HV"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        for i, bus in enumerate(self.buses):
            if bus.id != i:
                raise GridError(f"bus at position {i} has id {bus.id}")

    @property
    def n(self) -> int:
        return len(self.buses)

    @cached_property
    def types(self) -> np.ndarray:
        return np.array([int(b.kind) for b in self.buses], dtype=np.int64)

    @cached_property
    def p_set(self) -> np.ndarray:
        return np.array([b.p_set for b in self.buses], dtype=float)

    @cached_property
    def q_set(self) -> np.ndarray:
        return np.array([b.q_set for b in self.buses], dtype=float)

    @cached_property
    def v_set(self) -> np.ndarray:
        return np.array([b.v_set for b in self.buses], dtype=float)

    @cached_property
    def theta_set(self) -> np.ndarray:
        return np.array([b.theta_set for b in self.buses], dtype=float)

    @cached_property
    def line_array(self) -> np.ndarray:
        """Lines as an (L, 5) array of ``from, to, r, x, b``."""
        if not self.lines:
            return np.zeros((0, 5))
        return np.array(
            [(ln.from_bus, ln.to_bus, ln.r_series, ln.x_series, ln.b_shunt_total) for ln in self.lines],
            dtype=float,
        )

    @cached_property
    def pvpq(self) -> np.ndarray:
        return np.flatnonzero(self.types != BusType.SLACK)

    @cached_property
    def pq(self) -> np.ndarray:
        return np.flatnonzero(self.types == BusType.PQ)

    @cached_property
    def pv(self) -> np.ndarray:
        return np.flatnonzero(self.types == BusType.PV)

    @cached_property
    def slack(self) -> np.ndarray:
        return np.flatnonzero(self.types == BusType.SLACK)

    def permuted(self, perm) -> "Grid":
        """Relabel buses so that old bus ``perm[k]`` becomes new bus ``k``."""
        perm = np.asarray(perm)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        buses = [
            Bus(k, self.buses[old].kind, self.buses[old].p_set, self.buses[old].q_set,
                self.buses[old].v_set, self.buses[old].theta_set)
            for k, old in enumerate(perm)
        ]
        lines = [
            Line(int(inverse[ln.from_bus]), int(inverse[ln.to_bus]), ln.r_series, ln.x_series, ln.b_shunt_total)
            for ln in self.lines
        ]
        return Grid(tuple(buses), tuple(lines), self.v_base, self.s_base, self.regime)


def line_pi_params(line: Line) -> tuple[complex, float]:
    """Series admittance and per-end half shunt of a pi-model line."""
    z = complex(line.r_series, line.x_series)
    if z == 0:
        raise GridError("degenerate line: zero series impedance")
    return 1.0 / z, line.b_shunt_total / 2.0


def _components(n: int, edges) -> int:
    adjacency = [[] for _ in range(n)]
    for a, b in edges:
        adjacency[a].append(b)
        adjacency[b].append(a)
    seen = np.zeros(n, dtype=bool)
    count = 0
    for start in range(n):
        if seen[start]:
            continue
        count += 1
        seen[start] = True
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for w in adjacency[u]:
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)
    return count


def is_connected(n: int, edges) -> bool:
    return n <= 1 or _components(n, edges) == 1


def build_admittance(grid: Grid) -> np.ndarray:
    """Dense complex nodal admittance matrix of ``grid``.

    Parallel lines add their series admittances and shunts.
    """
    n = grid.n
    n_slack = int(np.sum(grid.types == BusType.SLACK))
    if n_slack != 1:
        raise GridError(f"bus typing: expected exactly one slack bus, found {n_slack}")
    edges = [(ln.from_bus, ln.to_bus) for ln in grid.lines]
    for a, b in edges:
        if a == b or not (0 <= a < n and 0 <= b < n):
            raise GridError(f"invalid line endpoints ({a}, {b})")
    if not is_connected(n, edges):
        raise GridError("disconnected grid")

    Y = np.zeros((n, n), dtype=complex)
    for ln in grid.lines:
        y, b_half = line_pi_params(ln)
        i, j = ln.from_bus, ln.to_bus
        Y[i, j] -= y
        Y[j, i] -= y
        Y[i, i] += y + 1j * b_half
        Y[j, j] += y + 1j * b_half
    return Y


def shunt_per_bus(grid: Grid) -> np.ndarray:
    """Total shunt susceptance B^sh_i attached to every bus (half of each incident line)."""
    b = np.zeros(grid.n)
    for ln in grid.lines:
        b[ln.from_bus] += ln.b_shunt_total / 2.0
        b[ln.to_bus] += ln.b_shunt_total / 2.0
    return b


# --- engineering units -------------------------------------------------------

@dataclass(frozen=True)
class EngineeringLine:
    from_bus: int
    to_bus: int
    length_km: float
    r_ohm_per_km: float
    x_ohm_per_km: float
    c_nf_per_km: float


@dataclass(frozen=True)
class EngineeringBus:
    id: int
    kind: BusType
    p_mw: float = 0.0
    q_mvar: float = 0.0
    v_set_pu: float = 1.0


@dataclass(frozen=True)
class EngineeringGrid:
    buses: tuple[EngineeringBus, ...]
    lines: tuple[EngineeringLine, ...]
    v_base: float  # volts
    s_base: float  # volt-amperes
    regime: str = "HV"
    frequency_hz: float = SYSTEM_FREQUENCY_HZ


def base_impedance(v_base: float, s_base: float) -> float:
    if not (v_base > 0 and s_base > 0):
        raise GridError(f"bases must be positive, got v_base={v_base}, s_base={s_base}")
    return v_base ** 2 / s_base


def to_per_unit(eng: EngineeringGrid) -> Grid:
    z_base = base_impedance(eng.v_base, eng.s_base)
    omega = 2.0 * math.pi * eng.frequency_hz
    s_mva = eng.s_base / 1e6
    buses = tuple(
        Bus(b.id, b.kind, b.p_mw / s_mva, b.q_mvar / s_mva, b.v_set_pu, 0.0) for b in eng.buses
    )
    lines = tuple(
        Line(
            ln.from_bus,
            ln.to_bus,
            ln.r_ohm_per_km * ln.length_km / z_base,
            ln.x_ohm_per_km * ln.length_km / z_base,
            omega * ln.c_nf_per_km * 1e-9 * ln.length_km * z_base,
        )
        for ln in eng.lines
    )
    return Grid(buses, lines, eng.v_base, eng.s_base, eng.regime)


def to_engineering(grid: Grid, lengths_km, frequency_hz: float = SYSTEM_FREQUENCY_HZ) -> EngineeringGrid:
    """Inverse of :func:`to_per_unit`; line lengths are not recoverable from p.u. and must be given."""
    z_base = base_impedance(grid.v_base, grid.s_base)
    omega = 2.0 * math.pi * frequency_hz
    s_mva = grid.s_base / 1e6
    buses = tuple(EngineeringBus(b.id, b.kind, b.p_set * s_mva, b.q_set * s_mva, b.v_set) for b in grid.buses)
    lines = tuple(
        EngineeringLine(
            ln.from_bus,
            ln.to_bus,
            length,
            ln.r_series * z_base / length,
            ln.x_series * z_base / length,
            ln.b_shunt_total / (omega * z_base * length) * 1e9,
        )
        for ln, length in zip(grid.lines, lengths_km)
    )
    return EngineeringGrid(buses, lines, grid.v_base, grid.s_base, grid.regime, frequency_hz)


# --- validation --------------------------------------------------------------

@dataclass
class ValidationReport:
    connected: bool = True
    slack_count: int = 1
    duplicate_edges: list[tuple[int, int]] = field(default_factory=list)
    problems: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.problems


def validate_grid(grid: Grid, v_bounds: tuple[float, float] = (0.8, 1.2)) -> ValidationReport:
    report = ValidationReport()
    n = grid.n
    report.slack_count = int(np.sum(grid.types == BusType.SLACK))
    if report.slack_count != 1:
        report.problems.append(f"bus typing: {report.slack_count} slack buses")

    seen = set()
    edges = []
    for ln in grid.lines:
        a, b = ln.from_bus, ln.to_bus
        if not (0 <= a < n and 0 <= b < n):
            report.problems.append(f"line ({a}, {b}) references a missing bus")
            continue
        if a == b:
            report.problems.append(f"self-loop at bus {a}")
            continue
        key = (min(a, b), max(a, b))
        if key in seen:
            report.duplicate_edges.append(key)
        seen.add(key)
        edges.append((a, b))
        if not (ln.r_series >= 0 and ln.x_series > 0 and ln.b_shunt_total >= 0):
            report.problems.append(f"parameter range: line ({a}, {b}) r={ln.r_series} x={ln.x_series} b={ln.b_shunt_total}")
    if report.duplicate_edges:
        report.problems.append(f"duplicate edges: {report.duplicate_edges}")

    report.connected = is_connected(n, edges)
    if not report.connected:
        report.problems.append("disconnected")

    lo, hi = v_bounds
    for bus in grid.buses:
        if not (np.isfinite(bus.p_set) and np.isfinite(bus.q_set)):
            report.problems.append(f"parameter range: bus {bus.id} has non-finite setpoints")
        if bus.kind != BusType.PQ and not (lo <= bus.v_set <= hi):
            report.problems.append(f"parameter range: bus {bus.id} v_set={bus.v_set}")
    return report
