"""Power injections, mismatch residuals, the merit function, the polar Jacobian and Newton-Raphson."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .grid import BusType, Grid

NR_TOL = 1e-8
NR_MAX_ITER = 30


@dataclass
class State:
    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.v.shape != self.theta.shape:
            raise ValueError(f"v has shape {self.v.shape} but theta has shape {self.theta.shape}")

    @property
    def complex_voltage(self) -> np.ndarray:
        return self.v * np.exp(1j * self.theta)

    def copy(self) -> "State":
        return State(self.v.copy(), self.theta.copy())

    @classmethod
    def flat(cls, grid: Grid) -> "State":
        """V = v_set at Slack/PV buses, 1.0 at PQ buses; zero angles."""
        v = np.where(grid.types == BusType.PQ, 1.0, grid.v_set)
        return cls(v, np.zeros(grid.n))


@dataclass
class Residual:
    dp: np.ndarray
    dq: np.ndarray
    p_mask: np.ndarray
    q_mask: np.ndarray


@dataclass
class Jacobian:
    """Reduced polar Jacobian with rows [dP at pvpq; dQ at pq] and columns [theta at pvpq; V at pq]."""

    matrix: np.ndarray
    pvpq: np.ndarray
    pq: np.ndarray

    @property
    def _split(self) -> int:
        return self.pvpq.size

    @property
    def H(self):
        return self.matrix[: self._split, : self._split]

    @property
    def N(self):
        return self.matrix[: self._split, self._split:]

    @property
    def M(self):
        return self.matrix[self._split:, : self._split]

    @property
    def L(self):
        return self.matrix[self._split:, self._split:]


@dataclass
class NrReport:
    converged: bool
    iterations: int
    final_merit: float
    wall_time: float
    reason: str = ""
    merit_trail: list[float] = field(default_factory=list)


def wrap_angle(theta):
    """Map angles to (-pi, pi]; -pi itself maps to +pi."""
    theta = np.asarray(theta, dtype=float)
    return theta - 2.0 * np.pi * np.ceil((theta - np.pi) / (2.0 * np.pi))


def clip_voltage(v, v_min: float = 0.8, v_max: float = 1.2):
    return np.clip(v, v_min, v_max)


def compute_injections(Y: np.ndarray, state: State) -> tuple[np.ndarray, np.ndarray]:
    V = state.complex_voltage
    S = V * np.conj(Y @ V)
    return S.real, S.imag


def residual_masks(types) -> tuple[np.ndarray, np.ndarray]:
    types = np.asarray(types)
    return types != BusType.SLACK, types == BusType.PQ


def compute_residuals(grid: Grid, Y: np.ndarray, state: State) -> Residual:
    p, q = compute_injections(Y, state)
    p_mask, q_mask = residual_masks(grid.types)
    dp = np.where(p_mask, grid.p_set - p, 0.0)
    dq = np.where(q_mask, grid.q_set - q, 0.0)
    return Residual(dp, dq, p_mask, q_mask)


def merit(residual: Residual) -> float:
    """max(||dP||_inf, ||dQ||_inf) over the defined entries."""
    parts = [np.abs(residual.dp[residual.p_mask]), np.abs(residual.dq[residual.q_mask])]
    parts = [x for x in parts if x.size]
    if not parts:
        return 0.0
    return float(max(x.max() for x in parts))


def power_derivatives(Y: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Complex dS/dVm and dS/dVa for the full bus set (dense)."""
    ibus = Y @ V
    vnorm = V / np.abs(V)
    dS_dVm = V[:, None] * np.conj(Y * vnorm[None, :])
    dS_dVm[np.diag_indices_from(dS_dVm)] += np.conj(ibus) * vnorm
    dS_dVa = -1j * V[:, None] * np.conj(Y * V[None, :])
    dS_dVa[np.diag_indices_from(dS_dVa)] += 1j * V * np.conj(ibus)
    return dS_dVm, dS_dVa


def assemble_jacobian(Y: np.ndarray, state: State, types) -> Jacobian:
    types = np.asarray(types)
    pvpq = np.flatnonzero(types != BusType.SLACK)
    pq = np.flatnonzero(types == BusType.PQ)
    dS_dVm, dS_dVa = power_derivatives(Y, state.complex_voltage)
    H = dS_dVa[np.ix_(pvpq, pvpq)].real
    N = dS_dVm[np.ix_(pvpq, pq)].real
    M = dS_dVa[np.ix_(pq, pvpq)].imag
    L = dS_dVm[np.ix_(pq, pq)].imag
    return Jacobian(np.block([[H, N], [M, L]]), pvpq, pq)


def nr_solve(
    grid: Grid,
    Y: np.ndarray,
    state0: State,
    tol: float = NR_TOL,
    max_iter: int = NR_MAX_ITER,
) -> tuple[State, NrReport]:
    """Full Newton-Raphson in polar coordinates with dense LU.

    Slack (V, theta) and PV magnitudes are never touched, so they stay
    bit-identical to ``state0``.
    """
    start = time.perf_counter()
    state = state0.copy()
    if np.any(state.v <= 0):
        raise ValueError("initial voltage magnitudes must be positive")
    pvpq, pq = grid.pvpq, grid.pq
    n_theta = pvpq.size

    residual = compute_residuals(grid, Y, state)
    f = merit(residual)
    trail = [f]
    it = 0
    reason = ""
    while f > tol and it < max_iter:
        jac = assemble_jacobian(Y, state, grid.types)
        rhs = np.concatenate([residual.dp[pvpq], residual.dq[pq]])
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                lu = scipy.linalg.lu_factor(jac.matrix, check_finite=False)
            if np.any(np.diag(lu[0]) == 0):
                raise np.linalg.LinAlgError("zero pivot")
            dx = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            reason = f"singular Jacobian: {exc}"
            break
        it += 1
        state.theta[pvpq] = wrap_angle(state.theta[pvpq] + dx[:n_theta])
        state.v[pq] = state.v[pq] + dx[n_theta:]
        if not (np.all(np.isfinite(state.v)) and np.all(np.isfinite(state.theta))):
            reason = "non-finite state"
            f = float("nan")
            trail.append(f)
            break
        residual = compute_residuals(grid, Y, state)
        f = merit(residual)
        trail.append(f)
        if not np.isfinite(f):
            reason = "non-finite mismatch"
            break

    converged = bool(np.isfinite(f) and f <= tol)
    if not converged and not reason:
        reason = f"no convergence within {max_iter} iterations"
    report = NrReport(converged, it, f, time.perf_counter() - start, reason, trail)
    return state, report
