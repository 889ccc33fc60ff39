"""Block-diagonal packing of several grids into one disconnected graph."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import BusType, Grid, line_pi_params
from .numerics import State


@dataclass
class BatchedGraph:
    """Concatenated buses and directed edges of ``n_graphs`` grids.

    Every undirected line pair (parallel lines merged) appears as two directed
    edges ``src -> dst``. ``g_edge + j b_edge`` is the off-diagonal admittance
    entry ``Y[dst, src]``; ``edge_features`` rows are ``[Re y, Im y, b_half, flag]``
    with ``y = -Y[dst, src]`` and ``flag = 1`` along the line's from->to orientation.
    """

    n: int
    offsets: np.ndarray  # (B + 1,)
    node_graph: np.ndarray  # (N,)
    types: np.ndarray
    p_set: np.ndarray
    q_set: np.ndarray
    v_set: np.ndarray
    p_mask: np.ndarray  # float 0/1, defined dP entries
    q_mask: np.ndarray  # float 0/1, defined dQ entries
    g_diag: np.ndarray
    b_diag: np.ndarray
    src: np.ndarray  # (E,)
    dst: np.ndarray
    g_edge: np.ndarray
    b_edge: np.ndarray
    edge_features: np.ndarray  # (E, 4)
    edge_graph: np.ndarray
    v0: np.ndarray
    theta0: np.ndarray

    @property
    def n_graphs(self) -> int:
        return self.offsets.size - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        return np.split(np.asarray(values), self.offsets[1:-1])


def _merged_pairs(grid: Grid):
    """Merge parallel lines into sorted pairs ``a < b``: (a, b, y, b_half, orientation_from)."""
    if not grid.lines:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0, dtype=complex), np.zeros(0), empty
    frm = np.array([ln.from_bus for ln in grid.lines], dtype=np.int64)
    to = np.array([ln.to_bus for ln in grid.lines], dtype=np.int64)
    params = [line_pi_params(ln) for ln in grid.lines]
    y = np.array([p[0] for p in params], dtype=complex)
    b_half = np.array([p[1] for p in params], dtype=float)
    lo, hi = np.minimum(frm, to), np.maximum(frm, to)
    keys, first, inverse = np.unique(lo * grid.n + hi, return_index=True, return_inverse=True)
    # parallel lines accumulate in input order
    y_sum = np.zeros(keys.size, dtype=complex)
    bh_sum = np.zeros(keys.size)
    np.add.at(y_sum, inverse, y)
    np.add.at(bh_sum, inverse, b_half)
    return lo[first], hi[first], y_sum, bh_sum, frm[first]


def graph_arrays(grid: Grid, state0: State | None = None) -> BatchedGraph:
    """Pack a single grid (B = 1)."""
    n = grid.n
    a, b, y, b_half, origin = _merged_pairs(grid)
    # each pair becomes a -> b followed by b -> a
    src = np.column_stack([a, b]).ravel()
    dst = np.column_stack([b, a]).ravel()
    y_dir = np.repeat(y, 2)
    bh = np.repeat(b_half, 2)
    flag = (src == np.repeat(origin, 2)).astype(float)

    y_diag = np.zeros(n, dtype=complex)
    np.add.at(y_diag, dst, y_dir + 1j * bh)
    types = grid.types
    if state0 is None:
        state0 = State.flat(grid)
    edge_features = np.column_stack([y_dir.real, y_dir.imag, bh, flag]) if src.size else np.zeros((0, 4))
    return BatchedGraph(
        n=n,
        offsets=np.array([0, n], dtype=np.int64),
        node_graph=np.zeros(n, dtype=np.int64),
        types=types,
        p_set=grid.p_set.copy(),
        q_set=grid.q_set.copy(),
        v_set=grid.v_set.copy(),
        p_mask=(types != BusType.SLACK).astype(float),
        q_mask=(types == BusType.PQ).astype(float),
        g_diag=y_diag.real,
        b_diag=y_diag.imag,
        src=src,
        dst=dst,
        g_edge=-y_dir.real,
        b_edge=-y_dir.imag,
        edge_features=edge_features,
        edge_graph=np.zeros(src.size, dtype=np.int64),
        v0=state0.v.copy(),
        theta0=state0.theta.copy(),
    )


def concat_graphs(parts: list[BatchedGraph]) -> BatchedGraph:
    """Block-diagonal concatenation; node and edge indices are offset, no edge crosses graphs."""
    if not parts:
        raise ValueError("cannot batch an empty list of graphs")
    node_offsets = np.concatenate([[0], np.cumsum([p.n for p in parts])]).astype(np.int64)
    graph_offsets = np.concatenate([[0], np.cumsum([p.n_graphs for p in parts])]).astype(np.int64)
    offsets = np.concatenate([p.offsets[:-1] + base for p, base in zip(parts, node_offsets)] + [[node_offsets[-1]]])

    def cat(name):
        return np.concatenate([getattr(p, name) for p in parts])

    return BatchedGraph(
        n=int(node_offsets[-1]),
        offsets=offsets.astype(np.int64),
        node_graph=np.concatenate([p.node_graph + g for p, g in zip(parts, graph_offsets)]),
        types=cat("types"),
        p_set=cat("p_set"),
        q_set=cat("q_set"),
        v_set=cat("v_set"),
        p_mask=cat("p_mask"),
        q_mask=cat("q_mask"),
        g_diag=cat("g_diag"),
        b_diag=cat("b_diag"),
        src=np.concatenate([p.src + o for p, o in zip(parts, node_offsets)]),
        dst=np.concatenate([p.dst + o for p, o in zip(parts, node_offsets)]),
        g_edge=cat("g_edge"),
        b_edge=cat("b_edge"),
        edge_features=np.concatenate([p.edge_features for p in parts], axis=0),
        edge_graph=np.concatenate([p.edge_graph + g for p, g in zip(parts, graph_offsets)]),
        v0=cat("v0"),
        theta0=cat("theta0"),
    )


def block_diag_batch(scenarios) -> BatchedGraph:
    """Pack scenarios (anything with ``.grid`` and ``.initial_state``) into one graph."""
    return concat_graphs([graph_arrays(s.grid, s.initial_state) for s in scenarios])


# --- numpy physics on the edge list --------------------------------------------

def injections(graph: BatchedGraph, v: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vi, vk = v[graph.dst], v[graph.src]
    dth = theta[graph.dst] - theta[graph.src]
    c, s = np.cos(dth), np.sin(dth)
    w = vi * vk
    p = v * v * graph.g_diag + np.bincount(graph.dst, w * (graph.g_edge * c + graph.b_edge * s), minlength=graph.n)
    q = -v * v * graph.b_diag + np.bincount(graph.dst, w * (graph.g_edge * s - graph.b_edge * c), minlength=graph.n)
    return p, q


def residuals(graph: BatchedGraph, v: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p, q = injections(graph, v, theta)
    return (graph.p_set - p) * graph.p_mask, (graph.q_set - q) * graph.q_mask


def graph_merits(graph: BatchedGraph, dp: np.ndarray, dq: np.ndarray) -> np.ndarray:
    """Per-graph max(||dP||_inf, ||dQ||_inf); masked entries are zero so they never dominate."""
    worst = np.maximum(np.abs(dp), np.abs(dq))
    return np.maximum.reduceat(worst, graph.offsets[:-1])


def active_merits(graph: BatchedGraph, v: np.ndarray, theta: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Per-graph merits computed only for graphs flagged in ``active``; other entries are NaN.

    Edges never cross graphs, so the active subset gives bit-identical values to a full evaluation.
    """
    if np.all(active):
        return graph_merits(graph, *residuals(graph, v, theta))
    edges = active[graph.edge_graph]
    dst, src = graph.dst[edges], graph.src[edges]
    vi, vk = v[dst], v[src]
    dth = theta[dst] - theta[src]
    c, s = np.cos(dth), np.sin(dth)
    w = vi * vk
    g_e, b_e = graph.g_edge[edges], graph.b_edge[edges]
    p = v * v * graph.g_diag + np.bincount(dst, w * (g_e * c + b_e * s), minlength=graph.n)
    q = -v * v * graph.b_diag + np.bincount(dst, w * (g_e * s - b_e * c), minlength=graph.n)
    out = graph_merits(graph, (graph.p_set - p) * graph.p_mask, (graph.q_set - q) * graph.q_mask)
    out[~active] = np.nan
    return out

